"""Small federated-training simulator.

Models are logistic regression or ReLU MLPs stored as one flat weight vector.
Every client step draws from ``default_rng([seed, round, client])`` so runs do
not depend on client execution order, and a one-client federation replays
centralized SGD bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from .measure_ot import DiscreteMeasure

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "fednova")
SCHEMES = ("iid", "label_skew", "mislabel", "imbalance")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, round_idx: int):
        super().__init__(message)
        self.round_idx = round_idx


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden_dims: tuple = ()
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 2 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"invalid architecture {self}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_weights(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: Arch
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size != self.arch.num_weights:
            raise ValueError(f"expected {self.arch.num_weights} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _unpack(self.arch, self.weights)


def _unpack(arch: Arch, w: np.ndarray):
    out = []
    pos = 0
    for i, o in arch.layer_shapes:
        W = w[pos:pos + i * o].reshape(i, o)
        pos += i * o
        out.append((W, w[pos:pos + o]))
        pos += o
    return out


def init_model(arch: Arch, seed: int = 0) -> ModelParams:
    """He-normal hidden layers, 1/fan_in output layer, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    shapes = arch.layer_shapes
    for k, (i, o) in enumerate(shapes):
        gain = 2.0 if k < len(shapes) - 1 else 1.0
        parts.append(rng.normal(0.0, np.sqrt(gain / i), size=i * o))
        parts.append(np.zeros(o))
    return ModelParams(arch, np.concatenate(parts))


def logits(model: ModelParams, X: np.ndarray) -> np.ndarray:
    h = np.asarray(X, dtype=float)
    layers = model.layers()
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
    W, b = layers[-1]
    return h @ W + b


def loss_and_grad(arch: Arch, w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to ``w``."""
    layers = _unpack(arch, w)
    acts = [X]
    for W, b in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ W + b, 0.0))
    W, b = layers[-1]
    logp = log_softmax(acts[-1] @ W + b, axis=1)
    n = X.shape[0]
    loss = -logp[np.arange(n), y].mean()

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads.append(delta.sum(axis=0))
        grads.append((acts[k].T @ delta).ravel())
        if k > 0:
            delta = (delta @ W.T) * (acts[k] > 0)
    return loss, np.concatenate(grads[::-1])


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    loss: float
    train_loss: Optional[float] = None


def evaluate(model: ModelParams, val: DiscreteMeasure) -> EvalResult:
    if val.labels is None:
        raise ValueError("evaluation needs labeled data")
    logp = log_softmax(logits(model, val.points), axis=1)
    y = val.labels
    acc = float(np.mean(np.argmax(logp, axis=1) == y))
    loss = float(-logp[np.arange(y.size), y].mean())
    return EvalResult(acc, loss)


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "fedavg"
    rounds: int = 10
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    mu: float = 0.0
    hidden_dims: tuple = ()
    num_classes: Optional[int] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if min(self.rounds, self.local_epochs, self.batch_size) < 1:
            raise ValueError("rounds, local_epochs and batch_size must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))


def _labeled(data: DiscreteMeasure):
    if data.labels is None:
        raise ValueError("training needs labeled data")
    return data.points, data.labels


def _sgd(arch, w, X, y, epochs, cfg, rng, correction=None, anchor=None, round_idx=0):
    n = X.shape[0]
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, g = loss_and_grad(arch, w, X[batch], y[batch])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in round {round_idx}", round_idx)
            if anchor is not None:
                g = g + cfg.mu * (w - anchor)
            if correction is not None:
                g = g + correction
            w = w - cfg.lr * g
            steps += 1
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"non-finite weights in round {round_idx}", round_idx)
    return w, steps


def local_train(
    model: ModelParams,
    data: DiscreteMeasure,
    global_ref: ModelParams,
    cfg: FedConfig,
    round_idx: int = 0,
    client_idx: int = 0,
    controls: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[ModelParams, dict]:
    """Run ``cfg.local_epochs`` of minibatch SGD on one client.

    ``aux`` always carries ``tau`` (local step count). For scaffold,
    ``controls`` is ``(server_control, client_control)`` and ``aux`` gains the
    refreshed client control and its change.
    """
    X, y = _labeled(data)
    if X.shape[1] != model.arch.input_dim:
        raise ValueError(f"model expects {model.arch.input_dim} features, data has {X.shape[1]}")
    rng = np.random.default_rng([cfg.seed, round_idx, client_idx])
    anchor = global_ref.weights if cfg.algorithm == "fedprox" and cfg.mu > 0 else None
    correction = None
    if cfg.algorithm == "scaffold":
        if controls is None:
            controls = (np.zeros_like(model.weights), np.zeros_like(model.weights))
        server_c, client_c = controls
        correction = server_c - client_c
    w, steps = _sgd(model.arch, model.weights, X, y, cfg.local_epochs, cfg, rng,
                    correction, anchor, round_idx)
    aux = {"tau": steps}
    if cfg.algorithm == "scaffold":
        if cfg.lr > 0:
            new_c = client_c - server_c + (global_ref.weights - w) / (steps * cfg.lr)
        else:
            new_c = client_c.copy()
        aux["control"] = new_c
        aux["control_delta"] = new_c - client_c
    return ModelParams(model.arch, w), aux


def aggregate(
    updates: Sequence[tuple[ModelParams, dict, int]],
    algorithm: str,
    global_model: Optional[ModelParams] = None,
    state: Optional[dict] = None,
) -> ModelParams:
    """Combine client models into the next global model.

    Deltas are taken against ``global_model`` when given, otherwise against
    the first update, so identical inputs come back unchanged. For scaffold,
    ``state["control"]`` holds the server control variate and is updated in
    place.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    arch = updates[0][0].arch
    if any(u[0].arch != arch for u in updates):
        raise ValueError("architecture mismatch among updates")
    if global_model is not None and global_model.arch != arch:
        raise ValueError("architecture mismatch with the global model")
    counts = np.array([u[2] for u in updates], dtype=float)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("sample counts must be nonnegative with a positive total")
    base = updates[0][0].weights if global_model is None else global_model.weights
    out = base.copy()

    if algorithm in ("fedavg", "fedprox"):
        alphas = counts / counts.sum()
        for a, (m, _, _) in zip(alphas, updates):
            if a != 0.0:
                out += a * (m.weights - base)
    elif algorithm == "fednova":
        alphas = counts / counts.sum()
        taus = np.array([u[1]["tau"] for u in updates], dtype=float)
        if np.any(taus <= 0):
            raise ValueError("fednova needs positive local step counts")
        step = np.zeros_like(base)
        for a, tau, (m, _, _) in zip(alphas, taus, updates):
            if a != 0.0:
                step += a * (m.weights - base) / tau
        out += float(alphas @ taus) * step
    else:
        share = 1.0 / len(updates)
        for m, _, _ in updates:
            out += share * (m.weights - base)
        if state is not None:
            control = state.get("control")
            if control is None:
                control = np.zeros_like(base)
            deltas = [u[1].get("control_delta") for u in updates]
            if any(d is not None for d in deltas):
                control = control + share * sum(d for d in deltas if d is not None)
            state["control"] = control
    return ModelParams(arch, out)


def infer_arch(sources: Sequence[DiscreteMeasure], val: Optional[DiscreteMeasure], cfg: FedConfig) -> Arch:
    dims = {s.d for s in sources} | ({val.d} if val is not None else set())
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
    num_classes = cfg.num_classes
    if num_classes is None:
        labels = [s.labels for s in sources] + ([val.labels] if val is not None else [])
        num_classes = max(2, int(max(l.max() for l in labels if l is not None)) + 1)
    return Arch(dims.pop(), cfg.hidden_dims, num_classes)


def _train_loss(model, sources):
    sizes = np.array([s.n for s in sources], dtype=float)
    losses = np.array([evaluate(model, s).loss for s in sources])
    return float(sizes @ losses / sizes.sum())


def fed_train(
    sources: Sequence[DiscreteMeasure],
    val: DiscreteMeasure,
    cfg: FedConfig,
    init: Optional[ModelParams] = None,
) -> tuple[ModelParams, list[EvalResult]]:
    """Full-participation federated training with per-round validation."""
    if not sources:
        raise ValueError("need at least one source")
    arch = infer_arch(sources, val, cfg)
    model = init if init is not None else init_model(arch, cfg.seed)
    if model.arch != arch:
        raise ValueError("initial model does not match the data")
    state: dict = {}
    client_controls = [np.zeros_like(model.weights) for _ in sources]
    trajectory = []
    for r in range(cfg.rounds):
        updates = []
        for c, data in enumerate(sources):
            controls = None
            if cfg.algorithm == "scaffold":
                server = state.get("control", np.zeros_like(model.weights))
                controls = (server, client_controls[c])
            local, aux = local_train(model, data, model, cfg, r, c, controls)
            if cfg.algorithm == "scaffold":
                client_controls[c] = aux["control"]
            updates.append((local, aux, data.n))
        anchor = None if cfg.algorithm in ("fedavg", "fedprox") else model
        model = aggregate(updates, cfg.algorithm, anchor, state)
        res = evaluate(model, val)
        trajectory.append(EvalResult(res.accuracy, res.loss, _train_loss(model, sources)))
    return model, trajectory


def centralized_train(
    data: DiscreteMeasure,
    val: DiscreteMeasure,
    cfg: FedConfig,
    init: Optional[ModelParams] = None,
) -> tuple[ModelParams, list[EvalResult]]:
    """Plain SGD on pooled data, in blocks of ``local_epochs`` epochs per round."""
    arch = infer_arch([data], val, cfg)
    model = init if init is not None else init_model(arch, cfg.seed)
    X, y = _labeled(data)
    w = model.weights
    trajectory = []
    for r in range(cfg.rounds):
        rng = np.random.default_rng([cfg.seed, r, 0])
        w, _ = _sgd(arch, w, X, y, cfg.local_epochs, cfg, rng, round_idx=r)
        model = ModelParams(arch, w)
        res = evaluate(model, val)
        trajectory.append(EvalResult(res.accuracy, res.loss, _train_loss(model, [data])))
    return model, trajectory


# ---------------------------------------------------------------- data


def generate_synthetic(
    num_classes: int, d: int, n: int, class_sep: float = 4.0, seed: int = 0, noise: float = 1.0
) -> DiscreteMeasure:
    """Balanced Gaussian blobs with unit-variance noise around class means.

    Means are drawn at random and rescaled so the closest pair sits exactly
    ``class_sep`` apart.
    """
    if num_classes < 2 or d < 1:
        raise ValueError("need num_classes >= 2 and d >= 1")
    if n < num_classes:
        raise ValueError(f"n={n} cannot cover {num_classes} classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, d))
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
    closest = gaps[np.triu_indices(num_classes, 1)].min()
    means *= class_sep / closest
    labels = np.repeat(np.arange(num_classes), n // num_classes)
    labels = np.concatenate([labels, np.arange(n % num_classes)])
    labels = labels[rng.permutation(n)]
    points = means[labels] + noise * rng.normal(size=(n, d))
    return DiscreteMeasure.uniform(points, labels)


@dataclass(frozen=True)
class PartitionSpec:
    """How a labeled dataset is split across sources.

    ``label_skew`` uses ``labels_per_source``; ``mislabel`` uses ``fractions``;
    ``imbalance`` uses ``major_classes``/``major_proportion`` and applies to
    ``affected`` sources (all when None), each of size ``source_size``.
    With ``stratified``, ``iid`` and ``mislabel`` split every class evenly
    across sources instead of splitting one global permutation.
    """

    scheme: str = "iid"
    seed: int = 0
    labels_per_source: Optional[tuple] = None
    fractions: Optional[tuple] = None
    major_classes: Optional[frozenset] = None
    major_proportion: float = 0.7
    affected: Optional[frozenset] = None
    source_size: Optional[int] = None
    stratified: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "label_skew":
            if not self.labels_per_source:
                raise ValueError("label_skew needs labels_per_source")
            object.__setattr__(
                self, "labels_per_source", tuple(frozenset(int(l) for l in s) for s in self.labels_per_source)
            )
        if self.scheme == "mislabel":
            if self.fractions is None:
                raise ValueError("mislabel needs fractions")
            fr = tuple(float(f) for f in self.fractions)
            if any(not 0.0 <= f <= 1.0 for f in fr):
                raise ValueError("mislabel fractions must lie in [0, 1]")
            object.__setattr__(self, "fractions", fr)
        if self.scheme == "imbalance":
            if not self.major_classes:
                raise ValueError("imbalance needs major_classes")
            if not 0.0 < self.major_proportion < 1.0:
                raise ValueError("major_proportion must lie in (0, 1)")
            object.__setattr__(self, "major_classes", frozenset(int(c) for c in self.major_classes))
            if self.affected is not None:
                object.__setattr__(self, "affected", frozenset(int(a) for a in self.affected))


def _even_split(total: int, parts: int) -> np.ndarray:
    sizes = np.full(parts, total // parts)
    sizes[: total % parts] += 1
    return sizes


def _split(n, labels, m, rng, stratified):
    if not stratified:
        return [np.sort(idx) for idx in np.array_split(rng.permutation(n), m)]
    chunks = [[] for _ in range(m)]
    for k, c in enumerate(np.unique(labels)):
        members = rng.permutation(np.flatnonzero(labels == c))
        # rotate which sources get the leftover rows so sizes stay balanced
        for i, part in enumerate(np.array_split(members, m)):
            chunks[(i + k) % m].append(part)
    return [np.sort(np.concatenate(c)) for c in chunks]


def partition(data: DiscreteMeasure, spec: PartitionSpec, m: int) -> list[DiscreteMeasure]:
    if m < 1:
        raise ValueError("m must be at least 1")
    if data.labels is None and (spec.scheme != "iid" or spec.stratified):
        raise ValueError(f"{spec.scheme} partitioning needs labels")
    rng = np.random.default_rng(spec.seed)
    n = data.n

    if spec.scheme == "iid":
        return [data.subset(idx) for idx in _split(n, data.labels, m, rng, spec.stratified)]

    labels = data.labels
    classes = np.unique(labels)

    if spec.scheme == "label_skew":
        sets = spec.labels_per_source
        if len(sets) != m:
            raise ValueError(f"{len(sets)} label sets for {m} sources")
        missing = set().union(*sets) - set(classes.tolist())
        if missing:
            raise ValueError(f"label_skew references absent labels {sorted(missing)}")
        chosen = [[] for _ in range(m)]
        for c in classes:
            owners = [i for i, s in enumerate(sets) if c in s]
            if not owners:
                continue
            members = rng.permutation(np.flatnonzero(labels == c))
            for owner, chunk in zip(owners, np.array_split(members, len(owners))):
                chosen[owner].append(chunk)
        out = []
        for i, parts in enumerate(chosen):
            idx = np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
            if idx.size == 0:
                raise ValueError(f"source {i} would be empty")
            out.append(data.subset(idx))
        return out

    if spec.scheme == "mislabel":
        if len(spec.fractions) != m:
            raise ValueError(f"{len(spec.fractions)} fractions for {m} sources")
        if classes.size < 2:
            raise ValueError("mislabeling needs at least two classes")
        out = []
        for frac, idx in zip(spec.fractions, _split(n, labels, m, rng, spec.stratified)):
            y = labels[idx].copy()
            flip = rng.choice(idx.size, size=int(round(frac * idx.size)), replace=False)
            for j in flip:
                others = classes[classes != y[j]]
                y[j] = others[rng.integers(others.size)]
            out.append(DiscreteMeasure.uniform(data.points[idx], y))
        return out

    # imbalance: sources draw independently, so points may repeat across sources
    major = np.array(sorted(spec.major_classes))
    if not set(major.tolist()) <= set(classes.tolist()):
        raise ValueError("imbalance references absent labels")
    minor = np.setdiff1d(classes, major)
    size = spec.source_size or n // m
    pools = {int(c): np.flatnonzero(labels == c) for c in classes}
    out = []
    for i in range(m):
        if spec.affected is not None and i not in spec.affected:
            out.append(data.subset(np.sort(rng.choice(n, size=size, replace=False))))
            continue
        n_major = int(round(spec.major_proportion * size)) if minor.size else size
        quota = dict(zip(major.tolist(), _even_split(n_major, major.size)))
        quota.update(zip(minor.tolist(), _even_split(size - n_major, max(minor.size, 1))))
        idx = []
        for c, q in quota.items():
            if q > pools[c].size:
                raise ValueError(f"class {c} has {pools[c].size} points, {q} requested")
            idx.append(rng.choice(pools[c], size=q, replace=False))
        out.append(data.subset(np.sort(np.concatenate(idx))))
    return out
