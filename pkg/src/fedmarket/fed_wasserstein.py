"""Privacy-preserving Wasserstein approximation across parties.

Every party pushes its data part of the way toward a shared Gaussian cloud
(barycentric interpolation) and only the interpolated points leave the party.
Distances between interpolating measures, rescaled by ``1/(1-t)``, stand in for
distances between the raw datasets. Multi-seller pools are handled by stacking
per-seller cost blocks against the buyer's interpolating measure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .measure_ot import (
    CalibratedScores,
    DiscreteMeasure,
    TransportSolution,
    build_cost,
    calibrated_gradients,
    solve,
)

DEFAULT_T = 0.5
DEFAULT_T_MIN = 0.3


class PrivacyError(ValueError):
    """An interpolating measure would reveal too much of the raw data."""


@dataclass(frozen=True)
class SharedMeasureSpec:
    seed: int
    k: int
    d: int
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if not self.std > 0:
            raise ValueError("std must be positive")


def sample_shared_measure(spec: SharedMeasureSpec) -> DiscreteMeasure:
    """Isotropic Gaussian cloud with uniform masses, fully determined by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    points = rng.normal(spec.mean, spec.std, size=(spec.k, spec.d))
    return DiscreteMeasure.uniform(points)


def check_shared_std(std: float, party_sizes: Sequence[int], k: int) -> bool:
    """Warn when ``std**2`` exceeds ``sqrt(2 / (p_a^2 + p_b^2))`` for some pair
    of parties, with ``p^2 = n / (n + k - 1)``. Returns True when satisfied."""
    ok = True
    fractions = [n / (n + k - 1) for n in party_sizes]
    for i in range(len(fractions)):
        for j in range(i + 1, len(fractions)):
            bound = np.sqrt(2.0 / (fractions[i] + fractions[j]))
            if std**2 > bound:
                ok = False
    if not ok:
        warnings.warn(
            f"shared-measure std {std} is above the approximation-error bound for these party sizes",
            stacklevel=2,
        )
    return ok


@dataclass(frozen=True, eq=False)
class InterpolatingMeasure:
    """Interpolated copy of a party's data; the only form in which it is shared."""

    t: float
    points: np.ndarray
    owner: str = ""
    labels: Optional[np.ndarray] = None
    masses: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.t < 1.0:
            raise ValueError(f"t must lie in [0, 1), got {self.t}")
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        n = points.shape[0]
        masses = np.full(n, 1.0 / n)
        if self.masses is not None and not np.allclose(self.masses, masses, rtol=0, atol=1e-12):
            raise ValueError("interpolating measures carry uniform masses")
        labels = None if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "labels", labels)

    @property
    def source_size(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def as_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure.uniform(self.points, self.labels)


def barycentric_interpolate(
    local: DiscreteMeasure,
    shared: DiscreteMeasure,
    t: float = DEFAULT_T,
    owner: str = "",
    t_min: Optional[float] = None,
    power: int = 1,
) -> InterpolatingMeasure:
    """Move each local point a fraction ``t`` toward its barycentric image.

    The image of point ``i`` is ``n * (P @ shared.points)[i]`` where ``P`` is
    the exact feature-only transport plan from ``local`` (uniform masses) to
    ``shared``. Labels ride along unchanged. Passing ``t_min`` enforces the
    privacy floor.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    if t_min is not None and t < t_min:
        raise PrivacyError(f"t={t} is below the privacy floor {t_min}")
    if local.d != shared.d:
        raise ValueError(f"dimension mismatch: {local.d} vs {shared.d}")
    n = local.n
    if t == 0.0:
        points = local.points.copy()
    else:
        uniform = DiscreteMeasure.uniform(local.points)
        plan = solve(build_cost(uniform, shared, 0.0, power), uniform.masses, shared.masses).plan
        image = n * (plan @ shared.points)
        points = (1.0 - t) * local.points + t * image
    return InterpolatingMeasure(t, points, owner, local.labels)


def _pair_cost(eta_a, eta_b, label_penalty, power=1):
    return build_cost(eta_a.as_measure(), eta_b.as_measure(), label_penalty, power)


def approx_wasserstein_pair(
    eta_a: InterpolatingMeasure, eta_b: InterpolatingMeasure, label_penalty: float = 0.0
) -> float:
    """``W(eta_a, eta_b) / (1 - t)``."""
    if eta_a.t != eta_b.t:
        raise ValueError(f"mismatched t: {eta_a.t} vs {eta_b.t}")
    if eta_a.d != eta_b.d:
        raise ValueError(f"dimension mismatch: {eta_a.d} vs {eta_b.d}")
    cost = _pair_cost(eta_a, eta_b, label_penalty)
    return solve(cost, eta_a.masses, eta_b.masses).objective / (1.0 - eta_a.t)


@dataclass(frozen=True, eq=False)
class ConcatCostMatrix:
    """Per-seller cost blocks against one validation measure, stacked by rows."""

    blocks: tuple
    source_offsets: tuple
    t: float = 0.0

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=float) for b in self.blocks)
        if not blocks or any(b.ndim != 2 for b in blocks):
            raise ValueError("blocks must be a nonempty sequence of matrices")
        cols = {b.shape[1] for b in blocks}
        if len(cols) > 1:
            raise ValueError("all blocks must share the validation column count")
        start = 0
        for (lo, hi), b in zip(self.source_offsets, blocks):
            if lo != start or hi - lo != b.shape[0]:
                raise ValueError("offsets must partition the pooled row range")
            start = hi
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_blocks(cls, blocks, t: float = 0.0) -> "ConcatCostMatrix":
        offsets = []
        start = 0
        for b in blocks:
            offsets.append((start, start + b.shape[0]))
            start += b.shape[0]
        return cls(tuple(blocks), tuple(offsets), t)

    @property
    def num_sources(self) -> int:
        return len(self.blocks)

    @property
    def num_cols(self) -> int:
        return self.blocks[0].shape[1]

    @property
    def rows_per_source(self) -> list[int]:
        return [b.shape[0] for b in self.blocks]

    @property
    def values(self) -> np.ndarray:
        return np.vstack(self.blocks)


def concat_cost(
    seller_etas: Sequence[InterpolatingMeasure],
    eta_val: InterpolatingMeasure,
    label_penalty: float = 0.0,
) -> ConcatCostMatrix:
    """Stack each seller's cost block against the buyer's interpolating measure."""
    if len(seller_etas) == 0:
        raise ValueError("need at least one seller")
    for eta in seller_etas:
        if eta.t != eta_val.t:
            raise ValueError(f"mismatched t: {eta.t} vs {eta_val.t}")
        if eta.d != eta_val.d:
            raise ValueError(f"dimension mismatch: {eta.d} vs {eta_val.d}")
    blocks = [_pair_cost(eta, eta_val, label_penalty).values for eta in seller_etas]
    return ConcatCostMatrix.from_blocks(blocks, eta_val.t)


def subselect(cost: ConcatCostMatrix, indices: Sequence[Sequence[int]]) -> ConcatCostMatrix:
    """Keep only the listed rows of each block, in the given order."""
    if len(indices) != cost.num_sources:
        raise ValueError(f"expected {cost.num_sources} index lists, got {len(indices)}")
    blocks = []
    for s, (block, idx) in enumerate(zip(cost.blocks, indices)):
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= block.shape[0]):
            raise IndexError(f"source {s}: index out of range for {block.shape[0]} rows")
        if np.unique(idx).size != idx.size:
            raise ValueError(f"source {s}: duplicate indices")
        blocks.append(block[idx])
    return ConcatCostMatrix.from_blocks(blocks, cost.t)


@dataclass(frozen=True, eq=False)
class CombineWadResult:
    value: float
    per_point_scores: CalibratedScores
    per_source_scores: np.ndarray
    solution: Optional[TransportSolution] = None
    rows_per_source: tuple = ()


def combine_wad(
    cost: ConcatCostMatrix,
    t: Optional[float] = None,
    candidates: Optional[ConcatCostMatrix] = None,
) -> CombineWadResult:
    """Approximate ``W(sum_i D_i, D_val)`` from the stacked cost.

    Pooled rows carry mass ``1 / sum_i n_i``; validation columns are uniform.
    Scores are rescaled by ``1/(1-t)`` so they differentiate ``value``. A
    source with no pooled rows gets the mean calibrated score of its rows in
    ``candidates`` (c-transform of the validation potentials), or 0 without
    candidates.
    """
    t = cost.t if t is None else t
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    C = cost.values
    total = C.shape[0]
    if total == 0:
        raise ValueError("the pooled selection is empty")
    scale = 1.0 / (1.0 - t)
    sol = solve(C, np.full(total, 1.0 / total), np.full(cost.num_cols, 1.0 / cost.num_cols))
    if total >= 2:
        scores = calibrated_gradients(sol).scores * scale
    else:
        scores = np.zeros(1)
    per_source = np.zeros(cost.num_sources)
    for s, (lo, hi) in enumerate(cost.source_offsets):
        if hi > lo:
            per_source[s] = scores[lo:hi].mean()
        elif candidates is not None and candidates.blocks[s].shape[0] > 0:
            # dual value a new row would receive: min_j C_kj - g_j
            f_new = (candidates.blocks[s] - sol.dual_g[None, :]).min(axis=1)
            per_source[s] = scale * (f_new.mean() - sol.dual_f.mean())
    return CombineWadResult(
        sol.objective * scale,
        CalibratedScores(scores),
        per_source,
        sol,
        tuple(cost.rows_per_source),
    )


def agg_wad(
    seller_etas: Sequence[InterpolatingMeasure],
    eta_val: InterpolatingMeasure,
    alphas,
    label_penalty: float = 0.0,
) -> float:
    """``sum_i alpha_i * approx_wasserstein_pair(eta_i, eta_val)``."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (len(seller_etas),):
        raise ValueError("one weight per seller is required")
    if np.any(alphas < -1e-6) or abs(alphas.sum() - 1.0) > 1e-6:
        raise ValueError("alphas must lie on the probability simplex")
    return float(
        sum(
            a * approx_wasserstein_pair(eta, eta_val, label_penalty)
            for a, eta in zip(alphas, seller_etas)
            if a != 0.0
        )
    )


def allocate_counts(p, budget: int) -> np.ndarray:
    """Integer per-source counts summing to ``budget`` (largest remainder)."""
    p = np.asarray(p, dtype=float)
    raw = p * budget
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = int(budget - counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(p.size), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


class SubsetOracle:
    """CombineWad of nested subsets drawn from fixed per-source permutations.

    Source ``i`` contributes the first ``counts[i]`` rows of its permutation,
    so the value is a deterministic function of (p, budget).
    """

    def __init__(self, cost: ConcatCostMatrix, seed: int = 0, permutations=None):
        self.cost = cost
        if permutations is None:
            rng = np.random.default_rng(seed)
            permutations = [rng.permutation(n) for n in cost.rows_per_source]
        self.permutations = [np.asarray(p, dtype=np.int64) for p in permutations]
        self._cache: dict = {}

    def indices(self, p, budget: int) -> list[np.ndarray]:
        counts = allocate_counts(p, budget)
        out = []
        for s, (c, perm) in enumerate(zip(counts, self.permutations)):
            if c > perm.size:
                raise ValueError(f"source {s} holds {perm.size} rows, {c} requested")
            out.append(perm[:c])
        return out

    def __call__(self, p, budget: int) -> CombineWadResult:
        key = (tuple(allocate_counts(p, budget)), budget)
        if key not in self._cache:
            sub = subselect(self.cost, self.indices(p, budget))
            self._cache[key] = combine_wad(sub, candidates=self.cost)
        return self._cache[key]
