"""Regenerate frozen oracle fixtures under tests/data.

    python tools/make_fixtures.py
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import random_rational_instance, transport_vertex_min  # noqa: E402


def vertex_fixture(count=200, seed=20240611):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        C, s, d = random_rational_instance(rng)
        out.append(
            {
                "cost": C.tolist(),
                "supply": [int(x) for x in s],
                "demand": [int(x) for x in d],
                "objective": transport_vertex_min(C, s, d),
            }
        )
    return out


if __name__ == "__main__":
    data = vertex_fixture()
    path = ROOT / "tests" / "data" / "ot_vertex_oracle.json"
    path.write_text(json.dumps(data, indent=1) + "\n")
    print(f"wrote {len(data)} instances to {path}")
