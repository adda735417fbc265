"""Scenario configs, seed fan-out, end-to-end runs and the batch studies.

A config is a flat TOML file of dotted keys, for example::

    seed = 7
    data.classes = 6
    partition.scheme = "label_skew"
    trials.budgets = [150, 300]

``CONFIG_KEYS`` lists every accepted key with its default.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import pearsonr, spearmanr

from .estimation import KINDS, SINGLE_SCALE_KINDS, TrialRecord, fit, project_scale, r_squared
from .feature_io import read_features
from .fed_wasserstein import (
    SharedMeasureSpec,
    agg_wad,
    approx_wasserstein_pair,
    barycentric_interpolate,
    sample_shared_measure,
)
from .fl_engine import FedConfig, PartitionSpec, generate_synthetic, partition
from .marketplace import (
    Buyer,
    RatioSampler,
    Seller,
    Session,
    run_formal_training,
    run_selection_phase,
    run_trial_phase,
    serve_party,
    write_report,
)
from .measure_ot import DiscreteMeasure, build_cost, calibrated_gradients, select_top_k, solve, wasserstein
from .protocol import InProcTransport, TcpTransport, audit_no_raw_leak

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_DIR = Path(__file__).parent / "configs"

CONFIG_KEYS = {
    "seed": 0,
    "output.dir": "runs/out",
    "data.kind": "synthetic",
    "data.classes": 6,
    "data.dim": 5,
    "data.class_sep": 4.0,
    "data.noise": 1.0,
    "data.source_size": 700,
    "data.val_size": 300,
    "data.train_path": "",
    "data.val_path": "",
    "partition.scheme": "label_skew",
    "partition.sources": 3,
    "partition.labels": [],
    "partition.fractions": [],
    "partition.major_classes": [],
    "partition.major_proportion": 0.7,
    "partition.stratified": False,
    "partition.pilot_size": 300,
    "fl.algorithm": "fedprox",
    "fl.mu": 0.1,
    "fl.rounds": 20,
    "fl.local_epochs": 1,
    "fl.lr": 0.05,
    "fl.batch_size": 32,
    "fl.hidden": [],
    "shared.k": 50,
    "shared.mean": 0.0,
    "shared.std": 1.0,
    "interp.t": 0.5,
    "interp.t_min": 0.3,
    "interp.label_penalty": "auto",
    "trials.count": 40,
    "trials.budgets": [150, 300],
    "formal.budget": 600,
    "estimator.kind": "affine_combinewad",
    "estimator.ridge": 1e-6,
    "optimizer.steps": 50,
    "optimizer.alpha0": 0.1,
    "optimizer.p0": [],
    "study.seeds": 5,
    "study.ks": [10, 50, 200, 1000],
}


class ConfigError(ValueError):
    pass


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase}: {cause}")
        self.phase = phase
        self.cause = cause


def derive_seed(master: int, tag: str) -> int:
    """``master XOR`` the first 4 bytes (little endian) of ``sha256(tag)``."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return (int(master) ^ int.from_bytes(digest[:4], "little")) & 0xFFFFFFFF


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class ScenarioConfig:
    values: dict
    path: Optional[Path] = None

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["output.dir"])

    @property
    def m(self) -> int:
        return int(self.values["partition.sources"])

    @property
    def budgets(self) -> list[int]:
        return [int(b) for b in self.values["trials.budgets"]]

    def fed(self, **overrides) -> FedConfig:
        v = self.values
        kw = dict(
            algorithm=v["fl.algorithm"],
            rounds=int(v["fl.rounds"]),
            local_epochs=int(v["fl.local_epochs"]),
            lr=float(v["fl.lr"]),
            batch_size=int(v["fl.batch_size"]),
            seed=derive_seed(self.seed, "fl"),
            mu=float(v["fl.mu"]) if v["fl.algorithm"] == "fedprox" else 0.0,
            hidden_dims=tuple(int(h) for h in v["fl.hidden"]),
            num_classes=int(v["data.classes"]) if v["data.kind"] == "synthetic" else None,
        )
        kw.update(overrides)
        return FedConfig(**kw)

    def shared(self) -> SharedMeasureSpec:
        v = self.values
        return SharedMeasureSpec(derive_seed(self.seed, "shared"), int(v["shared.k"]), self.dim,
                                 float(v["shared.mean"]), float(v["shared.std"]))

    @property
    def dim(self) -> int:
        return int(self.values["data.dim"])

    def p0(self) -> np.ndarray:
        p0 = self.values["optimizer.p0"]
        return np.asarray(p0, dtype=float) if len(p0) else np.full(self.m, 1.0 / self.m)

    def with_values(self, **kv) -> "ScenarioConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        cfg = ScenarioConfig(vals, self.path)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        if v["data.kind"] not in ("synthetic", "files"):
            raise ConfigError("data.kind must be 'synthetic' or 'files'")
        if v["data.kind"] == "files":
            for key in ("data.train_path", "data.val_path"):
                if not v[key] or not Path(v[key]).exists():
                    raise ConfigError(f"{key} does not exist: {v[key]!r}")
        budgets = self.budgets
        if not budgets or any(b < 1 for b in budgets):
            raise ConfigError("trials.budgets must be positive")
        if len(budgets) >= 2 and sorted(set(budgets)) != budgets:
            raise ConfigError("trials.budgets must be strictly increasing")
        if budgets[-1] > int(v["partition.pilot_size"]):
            raise ConfigError(
                f"largest trial budget {budgets[-1]} exceeds the pilot size {v['partition.pilot_size']}"
            )
        if int(v["partition.pilot_size"]) > int(v["data.source_size"]):
            raise ConfigError("pilot_size cannot exceed data.source_size")
        p0 = v["optimizer.p0"]
        if len(p0) and (len(p0) != self.m or abs(sum(p0) - 1) > 1e-9 or min(p0) < 0):
            raise ConfigError("optimizer.p0 must be a simplex point with one entry per source")
        if v["estimator.kind"] not in KINDS:
            raise ConfigError(f"unknown estimator kind {v['estimator.kind']!r}")
        lp = v["interp.label_penalty"]
        if not (lp == "auto" or isinstance(lp, (int, float))):
            raise ConfigError("interp.label_penalty must be a number or 'auto'")


def load_config(path=None, **overrides) -> ScenarioConfig:
    """Read a config file (or just the defaults) and apply ``overrides``.

    Unknown keys are rejected so that typos do not silently fall back to
    defaults. Relative data paths resolve against the config's directory.
    """
    values = dict(CONFIG_KEYS)
    src = None
    if path is not None:
        src = Path(path)
        if not src.exists() and (CONFIG_DIR / src.name).exists():
            src = CONFIG_DIR / src.name
        try:
            with open(src, "rb") as fh:
                raw = _flatten(tomllib.load(fh))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        for key in ("data.train_path", "data.val_path"):
            if raw.get(key) and not Path(raw[key]).is_absolute():
                raw[key] = str(src.parent / raw[key])
        values.update(raw)
    cfg = ScenarioConfig(values, src)
    cfg.validate()
    return cfg.with_values(**overrides) if overrides else cfg


# ---------------------------------------------------------------- world


def session_id(cfg: ScenarioConfig) -> str:
    return f"session-{cfg.seed}"


@dataclass
class World:
    sources: list
    pilots: list
    val: DiscreteMeasure

    def parties(self, cfg: ScenarioConfig):
        kw = dict(session_id=session_id(cfg), t=float(cfg["interp.t"]), t_min=float(cfg["interp.t_min"]))
        sellers = [
            Seller(f"seller{i}", pilot, full, seed=derive_seed(cfg.seed, f"seller/{i}"), **kw)
            for i, (pilot, full) in enumerate(zip(self.pilots, self.sources))
        ]
        return sellers, Buyer("buyer", self.val, **kw)

    def raw(self) -> dict:
        raw = {f"seller{i}": s for i, s in enumerate(self.sources)}
        raw["buyer"] = self.val
        return raw


def _stratified_holdout(data: DiscreteMeasure, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    classes = np.unique(data.labels)
    per = np.full(classes.size, size // classes.size)
    per[: size % classes.size] += 1
    take = []
    for c, q in zip(classes, per):
        take.append(rng.permutation(np.flatnonzero(data.labels == c))[:q])
    held = np.sort(np.concatenate(take))
    rest = np.setdiff1d(np.arange(data.n), held)
    return held, rest


def load_pool(cfg: ScenarioConfig) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """The unpartitioned training pool and the buyer's validation set."""
    v = cfg.values
    if v["data.kind"] == "files":
        return read_features(v["data.train_path"]), read_features(v["data.val_path"])
    n = cfg.m * int(v["data.source_size"]) + int(v["data.val_size"])
    data = generate_synthetic(int(v["data.classes"]), cfg.dim, n, float(v["data.class_sep"]),
                              derive_seed(cfg.seed, "data"), float(v["data.noise"]))
    held, rest = _stratified_holdout(data, int(v["data.val_size"]), np.random.default_rng(derive_seed(cfg.seed, "val")))
    return data.subset(rest), data.subset(held)


def build_world(cfg: ScenarioConfig) -> World:
    """Data, validation holdout, partition and pilot split, all seeded from
    the master seed."""
    v = cfg.values
    m = cfg.m
    pool, val = load_pool(cfg)
    if pool.points.shape[1] != cfg.dim or val.points.shape[1] != cfg.dim:
        raise ConfigError(f"feature files have {pool.points.shape[1]} columns, data.dim is {cfg.dim}")
    scheme = v["partition.scheme"]
    spec = PartitionSpec(
        scheme,
        seed=derive_seed(cfg.seed, "partition"),
        labels_per_source=v["partition.labels"] or None,
        fractions=v["partition.fractions"] or None,
        major_classes=v["partition.major_classes"] or None,
        major_proportion=float(v["partition.major_proportion"]),
        source_size=int(v["data.source_size"]) if scheme == "imbalance" else None,
        stratified=bool(v["partition.stratified"]),
    )
    sources = partition(pool, spec, m)
    pilot_size = int(v["partition.pilot_size"])
    pilots = []
    for i, src in enumerate(sources):
        if src.n < pilot_size:
            raise ConfigError(f"source {i} holds {src.n} rows, fewer than pilot_size {pilot_size}")
        order = np.random.default_rng(derive_seed(cfg.seed, f"pilot/{i}")).permutation(src.n)
        pilots.append(src.subset(np.sort(order[:pilot_size])))
    return World(sources, pilots, val)


def make_session(cfg: ScenarioConfig, world: Optional[World] = None, transport=None, remote: bool = False):
    world = world or build_world(cfg)
    sellers, buyer = world.parties(cfg)
    if remote:
        sellers, buyer = [s.id for s in sellers], buyer.id
    lp = cfg["interp.label_penalty"]
    sess = Session(sellers, buyer, transport, session_id=session_id(cfg), shared=cfg.shared(),
                   t=float(cfg["interp.t"]), t_min=float(cfg["interp.t_min"]),
                   label_penalty=lp if lp == "auto" else float(lp), cfg=cfg.fed())
    return sess, world


def serve_parties_in_threads(cfg: ScenarioConfig, world: World, address) -> list[threading.Thread]:
    """Serve every seller and the buyer over TCP from daemon threads."""
    sellers, buyer = world.parties(cfg)
    threads = []
    for party in [*sellers, buyer]:
        th = threading.Thread(target=serve_party, args=(party, TcpTransport(*address)), daemon=True)
        th.start()
        threads.append(th)
    return threads


def settle_log(log, quiet: float = 0.2, limit: float = 5.0) -> None:
    """Wait until a relay's log stops growing (frames still in flight)."""
    deadline = time.monotonic() + limit
    last = -1
    while len(log) != last and time.monotonic() < deadline:
        last = len(log)
        time.sleep(quiet)


# ---------------------------------------------------------------- scenario


def write_table(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


@dataclass
class ScenarioResult:
    records: list
    selection: object
    formal_accuracy: float
    baseline_accuracy: float
    audit_passed: bool
    out_dir: Path


def run_trials(cfg: ScenarioConfig, session=None, resume: bool = False) -> list[TrialRecord]:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / "records.jsonl"
    if path.exists() and not resume:
        path.unlink()
    session = session or make_session(cfg)[0]
    sampler = RatioSampler(cfg.m, derive_seed(cfg.seed, "sampler"))
    return run_trial_phase(session, int(cfg["trials.count"]), cfg.budgets, sampler, path)


def write_curves(path: Path, records: Sequence[TrialRecord], m: int) -> None:
    """Plot-ready table: one row per trial, ordered by budget then ratio index."""
    n_budgets = len({r.n for r in records})
    rows = []
    for j, r in enumerate(records):
        rows.append([j // n_budgets, r.n, *map(_fmt, r.p), _fmt(r.v), _fmt(r.w)])
    rows.sort(key=lambda row: (row[1], row[0]))
    write_table(path, ["ratio_index", "n", *(f"p_{i}" for i in range(m)), "accuracy", "combinewad"], rows)


def run_scenario(config, resume: bool = False, transport=None, remote: bool = False, **overrides) -> ScenarioResult:
    """Trials, estimator fit, ratio selection, formal training and reports.

    Writes records.jsonl, audit.jsonl, report.csv, curves.csv, selection.csv
    and summary.json into ``output.dir``. Failures raise :class:`PhaseError`.
    With ``remote=True`` the parties are expected on ``transport`` already.
    """
    cfg = config if isinstance(config, ScenarioConfig) else load_config(config, **overrides)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    phase = "setup"
    try:
        session, world = make_session(cfg, transport=transport, remote=remote)
        phase = "trial-runs"
        records = run_trials(cfg, session, resume)
        phase = "select"
        sel = run_selection_phase(session, records, int(cfg["formal.budget"]), cfg["estimator.kind"],
                                  cfg.p0(), int(cfg["optimizer.steps"]), float(cfg["optimizer.alpha0"]),
                                  float(cfg["estimator.ridge"]))
        phase = "formal-train"
        n = int(cfg["formal.budget"])
        _, res = run_formal_training(session, sel.p_star, n)
        _, base = run_formal_training(session, cfg.p0(), n)
        phase = "report"
        w_star = session.oracle()(sel.p_star, cfg.budgets[-1]).value
        final = TrialRecord(sel.p_star, n, w_star, res.accuracy, "selected")
        write_report(out / "report.csv", [*records, final])
        write_curves(out / "curves.csv", records, cfg.m)
        write_table(out / "selection.csv", ["step", *(f"p_{i}" for i in range(cfg.m)), "projected"],
                   [[k, *map(_fmt, p), _fmt(v)] for k, (p, v) in enumerate(sel.trajectory)])
        session.close()
        if not isinstance(session.transport, InProcTransport):
            settle_log(session.log)
        session.log.write(out / "audit.jsonl")
        audit = audit_no_raw_leak(session.log, world.raw(), float(cfg["interp.t_min"]))
        summary = {
            "p_star": sel.p_star.tolist(),
            "projected_accuracy": sel.projected,
            "formal_accuracy": res.accuracy,
            "baseline_p0": cfg.p0().tolist(),
            "baseline_accuracy": base.accuracy,
            "fit_budgets": list(sel.budgets),
            "r2_train": [e.r2_train for e in sel.estimators],
            "audit": "PASS" if audit.passed else "FAIL",
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(phase, exc) from exc
    return ScenarioResult(records, sel, res.accuracy, base.accuracy, audit.passed, out)


# ---------------------------------------------------------------- studies

STUDIES = ("convergence_signal", "prediction", "projection", "selection", "unlabeled", "privwad_error")


def simplex_grid(m: int, steps: int) -> list[np.ndarray]:
    """All ratios with coordinates in multiples of ``1/steps``."""
    out = []

    def rec(prefix, left):
        if len(prefix) == m - 1:
            out.append(np.array([*prefix, left]) / steps)
            return
        for k in range(left, -1, -1):
            rec(prefix + [k], left - k)

    rec([], steps)
    return out


def _grid_trials(cfg, grid, budgets, fed=None, world=None):
    sess, world = make_session(cfg, world)
    if fed is not None:
        sess.cfg = fed
    recs = run_trial_phase(sess, len(grid) * len(budgets), budgets, RatioSampler(cfg.m, grid=grid))
    return recs, sess, world


def study_convergence_signal(cfg: ScenarioConfig, grid_steps: int = 5) -> list[list]:
    """Spearman(CombineWad, accuracy) over a ratio grid for each algorithm."""
    grid = simplex_grid(cfg.m, grid_steps)
    world = build_world(cfg)
    rows = []
    for name, algo, mu in [("fedavg", "fedavg", 0.0), ("fedprox_0.1", "fedprox", 0.1),
                           ("fedprox_0.3", "fedprox", 0.3), ("scaffold", "scaffold", 0.0),
                           ("fednova", "fednova", 0.0)]:
        recs, _, _ = _grid_trials(cfg, grid, [cfg.budgets[-1]], cfg.fed(algorithm=algo, mu=mu), world)
        rho = spearmanr([r.w for r in recs], [r.v for r in recs])[0]
        rows.append([name, len(recs), _fmt(float(rho)), _fmt(float(np.mean([r.v for r in recs])))])
    return rows


def _aggwad_records(session, records):
    etas = [session.etas[s] for s in session.seller_ids]
    eta_val = session.etas[session.buyer_id]
    pair = [agg_wad([e], eta_val, [1.0], session.penalty) for e in etas]
    return [TrialRecord(r.p, r.n, float(np.asarray(pair) @ r.p), r.v, r.run_id) for r in records]


def study_prediction(cfg: ScenarioConfig, holdout: float = 0.25) -> list[list]:
    """Train / held-out r^2 of every estimator kind on one set of trial records."""
    sess, world = make_session(cfg)
    records = run_trials(cfg, sess)
    rng = np.random.default_rng(derive_seed(cfg.seed, "holdout"))
    test_mask = rng.random(len(records)) < holdout
    rows = []
    agg = _aggwad_records(sess, records)
    for kind in KINDS:
        recs = agg if kind == "aggwad" else records
        if kind in SINGLE_SCALE_KINDS:
            recs = [r for r in recs if r.n == cfg.budgets[-1]]
            mask = np.array([test_mask[int(r.run_id.split("-")[1])] for r in recs])
        else:
            mask = test_mask
        train = [r for r, t in zip(recs, mask) if not t]
        test = [r for r, t in zip(recs, mask) if t]
        est = fit(train, kind, ridge=float(cfg["estimator.ridge"]))
        rows.append([kind, len(train), len(test), _fmt(est.r2_train), _fmt(r_squared(est, test) if test else float("nan"))])
    return rows


def study_projection(cfg: ScenarioConfig, ratios: int = 8) -> list[list]:
    """Two-scale projection of accuracy to an unseen budget.

    Row ``loglinear`` projects an exactly log-linear synthetic accuracy curve;
    row ``fl`` projects real trial accuracies at the two trial budgets to
    ``2 x`` the larger one and compares with trained values at that budget.
    """
    n0, n1 = cfg.budgets[0], cfg.budgets[-1]
    n2 = 2 * n1
    rng = np.random.default_rng(derive_seed(cfg.seed, "projection"))
    a, b = rng.uniform(0.1, 0.3, 16), rng.uniform(0.02, 0.08, 16)
    true = a + b * math.log(n2)
    pred = [project_scale(ai + bi * math.log(n0), ai + bi * math.log(n1), n0, n1, n2) for ai, bi in zip(a, b)]
    rows = [["loglinear", 16, _fmt(float(pearsonr(pred, true)[0])), _fmt(float(np.max(np.abs(np.subtract(pred, true))))), ""]]
    sampler = RatioSampler(cfg.m, derive_seed(cfg.seed, "sampler"))
    grid = [sampler(j) for j in range(ratios)]
    wide = cfg.with_values(**{"partition.pilot_size": max(int(cfg["partition.pilot_size"]), n2),
                              "data.source_size": max(int(cfg["data.source_size"]), n2)})
    recs, _, _ = _grid_trials(wide, grid, [n0, n1, n2])
    v = {(r.n, j // 3): r.v for j, r in enumerate(recs)}
    pred = [project_scale(v[(n0, j)], v[(n1, j)], n0, n1, n2) for j in range(ratios)]
    true = [v[(n2, j)] for j in range(ratios)]
    rho01 = spearmanr([v[(n0, j)] for j in range(ratios)], [v[(n1, j)] for j in range(ratios)])[0]
    rows.append(["fl", ratios, _fmt(float(pearsonr(pred, true)[0])), _fmt(float(np.max(np.abs(np.subtract(pred, true))))),
                 _fmt(float(rho01))])
    return rows


def study_selection(cfg: ScenarioConfig) -> list[list]:
    res = run_scenario(cfg)
    return [[k, *map(_fmt, p), _fmt(v)] for k, (p, v) in enumerate(res.selection.trajectory)]


def regression_with_outliers(seed: int, n_pool: int = 600, n_val: int = 200, n_test: int = 500, d: int = 5,
                             outlier_frac: float = 0.3, shift: float = 4.0, noise: float = 0.1):
    """Linear-regression pool where ``outlier_frac`` of rows sit off the
    clean feature distribution and carry unrelated targets."""
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=d)

    def clean(n):
        X = rng.normal(size=(n, d))
        return X, X @ beta + noise * rng.normal(size=n)

    X, y = clean(n_pool)
    bad = rng.choice(n_pool, size=int(round(outlier_frac * n_pool)), replace=False)
    X[bad] += shift * rng.normal(size=(bad.size, d)) / math.sqrt(d) + shift * rng.choice([-1, 1], size=(bad.size, 1))
    y[bad] = rng.normal(0, 3 * np.std(y), size=bad.size)
    Xv, _ = clean(n_val)
    Xt, yt = clean(n_test)
    return (X, y, bad), Xv, (Xt, yt)


def _lstsq_mse(X, y, Xt, yt):
    A = np.c_[X, np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(np.mean((np.c_[Xt, np.ones(len(Xt))] @ coef - yt) ** 2))


def unlabeled_topk(seed: int, k: int, **kw) -> tuple[float, float]:
    """Test MSE after buying ``k`` rows chosen by calibrated OT scores against
    the buyer's unlabeled features, and after buying ``k`` random rows."""
    (X, y, _), Xv, (Xt, yt) = regression_with_outliers(seed, **kw)
    pool, ref = DiscreteMeasure.uniform(X), DiscreteMeasure.uniform(Xv)
    sol = solve(build_cost(pool, ref), pool.masses, ref.masses)
    chosen = select_top_k(calibrated_gradients(sol), k)
    rand = np.random.default_rng(seed + 1).choice(len(X), size=k, replace=False)
    return _lstsq_mse(X[chosen], y[chosen], Xt, yt), _lstsq_mse(X[rand], y[rand], Xt, yt)


def study_unlabeled(cfg: ScenarioConfig, budgets=(50, 100, 200, 400)) -> list[list]:
    rows = []
    seeds = [derive_seed(cfg.seed, f"unlabeled/{s}") for s in range(int(cfg["study.seeds"]))]
    for k in budgets:
        res = np.array([unlabeled_topk(s, k) for s in seeds])
        rows.append([k, _fmt(float(res[:, 0].mean())), _fmt(float(res[:, 1].mean())),
                     int(np.sum(res[:, 0] < res[:, 1])), len(seeds)])
    return rows


def privwad_errors(seed: int, ks: Sequence[int], n: int = 200, d: int = 5, t: float = 0.5,
                   shift: float = 1.0) -> list[float]:
    """|approx - exact| for one Gaussian pair at each shared-measure size."""
    rng = np.random.default_rng(seed)
    a = DiscreteMeasure.uniform(rng.normal(size=(n, d)))
    b = DiscreteMeasure.uniform(rng.normal(size=(n, d)) + shift / math.sqrt(d))
    exact = wasserstein(a, b)
    errs = []
    for k in ks:
        g = sample_shared_measure(SharedMeasureSpec(derive_seed(seed, f"gamma/{k}"), k, d))
        approx = approx_wasserstein_pair(barycentric_interpolate(a, g, t), barycentric_interpolate(b, g, t))
        errs.append(abs(approx - exact))
    return errs


def study_privwad_error(cfg: ScenarioConfig) -> list[list]:
    ks = [int(k) for k in cfg["study.ks"]]
    seeds = [derive_seed(cfg.seed, f"privwad/{s}") for s in range(int(cfg["study.seeds"]))]
    errs = np.array([privwad_errors(s, ks) for s in seeds])
    return [[k, _fmt(float(errs[:, i].mean())), _fmt(float(errs[:, i].std()))] for i, k in enumerate(ks)]


_STUDY_HEADERS = {
    "convergence_signal": ["algorithm", "trials", "spearman_w_acc", "mean_accuracy"],
    "prediction": ["kind", "n_train", "n_test", "r2_train", "r2_test"],
    "projection": ["source", "ratios", "pearson", "max_abs_error", "spearman_n0_n1"],
    "selection": None,
    "unlabeled": ["k", "mse_topk", "mse_random", "topk_wins", "seeds"],
    "privwad_error": ["k", "mean_abs_error", "std_abs_error"],
}


def run_study(study: str, config=None, **overrides) -> Path:
    """Run one study and write ``<study>.csv`` into ``output.dir``."""
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    cfg = config if isinstance(config, ScenarioConfig) else load_config(config, **overrides)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        rows = globals()[f"study_{study}"](cfg)
    except Exception as exc:
        raise PhaseError(study, exc) from exc
    header = _STUDY_HEADERS[study] or ["step", *(f"p_{i}" for i in range(cfg.m)), "projected"]
    path = cfg.out_dir / f"{study}.csv"
    write_table(path, header, rows)
    return path
