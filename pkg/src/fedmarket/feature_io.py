"""Feature-file ingestion.

Binary layout: ``b"FMKT"``, then little-endian u32 ``n``, ``d`` and a label
flag, then ``n*d`` float32 values row-major, then ``n`` u32 labels if flagged.
The CSV form has a header ``f0,...,f{d-1}[,label]``.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .measure_ot import DiscreteMeasure

MAGIC = b"FMKT"
_HEADER = struct.Struct("<4sIII")


def write_fmkt(path, data: DiscreteMeasure) -> None:
    n, d = data.points.shape
    has_labels = data.labels is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, d, int(has_labels)))
        fh.write(data.points.astype("<f4").tobytes())
        if has_labels:
            fh.write(data.labels.astype("<u4").tobytes())


def read_fmkt(path) -> DiscreteMeasure:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, d, flag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = n * d * 4
    expected = _HEADER.size + body + (n * 4 if flag else 0)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    points = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = None
    if flag:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + body).astype(np.int64)
    return DiscreteMeasure.uniform(points.astype(float), labels)


def write_csv(path, data: DiscreteMeasure) -> None:
    d = data.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(d)] + (["label"] if data.labels is not None else []))
        for i, row in enumerate(data.points):
            tail = [int(data.labels[i])] if data.labels is not None else []
            w.writerow([repr(float(x)) for x in row] + tail)


def read_csv(path) -> DiscreteMeasure:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    has_labels = header[-1] == "label"
    d = len(header) - int(has_labels)
    if header[:d] != [f"f{j}" for j in range(d)]:
        raise ValueError(f"{path}: unexpected header {header}")
    body = np.array(rows[1:], dtype=float).reshape(-1, len(header))
    labels = body[:, d].astype(np.int64) if has_labels else None
    return DiscreteMeasure.uniform(body[:, :d], labels)


def read_features(path) -> DiscreteMeasure:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    return read_fmkt(path)
