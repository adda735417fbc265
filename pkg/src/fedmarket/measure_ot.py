"""Discrete optimal transport: cost construction, exact and entropic solvers,
and calibrated-gradient valuation of individual points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ._netsimplex import network_simplex

MASS_ATOL = 1e-9
FEASIBILITY_ATOL = 1e-6

Method = Literal["exact", "entropic"]


class TransportError(RuntimeError):
    """Raised when a transport problem is infeasible or a solver fails."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted, optionally labeled point cloud."""

    points: np.ndarray
    masses: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if points.shape[0] < 1:
            raise ValueError("a measure needs at least one point")
        if masses.shape[0] != points.shape[0]:
            raise ValueError(
                f"{points.shape[0]} points but {masses.shape[0]} masses"
            )
        if np.any(masses < 0):
            raise ValueError("masses must be nonnegative")
        if abs(masses.sum() - 1.0) > MASS_ATOL:
            raise ValueError(f"masses sum to {masses.sum()!r}, expected 1")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != points.shape[0]:
                raise ValueError("labels must align with points")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def uniform(cls, points, labels=None) -> "DiscreteMeasure":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n), labels)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "DiscreteMeasure":
        """Uniformly reweighted restriction to the rows ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return DiscreteMeasure.uniform(self.points[idx], labels)


@dataclass(frozen=True, eq=False)
class CostMatrix:
    values: np.ndarray
    label_penalty: float = 0.0

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class TransportSolution:
    plan: np.ndarray
    objective: float
    dual_f: np.ndarray
    dual_g: np.ndarray
    method: str
    duality_gap: float
    iterations: int = 0

    def marginal_violation(self, a, b) -> float:
        return max(
            float(np.max(np.abs(self.plan.sum(axis=1) - a))),
            float(np.max(np.abs(self.plan.sum(axis=0) - b))),
        )


@dataclass(frozen=True, eq=False)
class CalibratedScores:
    scores: np.ndarray
    source_side: bool = True

    def __len__(self):
        return self.scores.shape[0]


def default_label_penalty(reference: DiscreteMeasure) -> float:
    """Twice the largest pairwise feature distance within ``reference``.

    A label mismatch then costs more than any feature displacement inside the
    reference set.
    """
    if reference.n < 2:
        return 0.0
    return 2.0 * float(cdist(reference.points, reference.points).max())


def build_cost(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    label_penalty: float = 0.0,
    power: int = 1,
) -> CostMatrix:
    """Pairwise ground cost ``||x_i - x'_j||^power + penalty * [y_i != y'_j]``.

    ``power=1`` is the plain Euclidean cost used throughout; ``power=2`` gives
    the squared cost.
    """
    if mu.d != nu.d:
        raise ValueError(f"dimension mismatch: {mu.d} vs {nu.d}")
    if label_penalty < 0:
        raise ValueError("label_penalty must be nonnegative")
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    if power == 1:
        values = cdist(mu.points, nu.points)
    else:
        values = cdist(mu.points, nu.points, "sqeuclidean")
    if label_penalty > 0:
        if mu.labels is None or nu.labels is None:
            raise ValueError("a positive label_penalty needs labels on both measures")
        values = values + label_penalty * (mu.labels[:, None] != nu.labels[None, :])
    return CostMatrix(values, float(label_penalty))


def _as_mass(x, size: int, name: str) -> np.ndarray:
    if x is None:
        return np.full(size, 1.0 / size)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != size:
        raise ValueError(f"{name} has length {x.shape[0]}, cost expects {size}")
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries")
    return x


def solve(
    cost: Union[CostMatrix, np.ndarray],
    a=None,
    b=None,
    method: Method = "exact",
    tol: float = 1e-9,
    *,
    epsilon: float = 1e-2,
    max_iter: Optional[int] = None,
) -> TransportSolution:
    """Solve the Kantorovich problem ``min <C, P>`` over couplings of (a, b).

    The exact method is a network simplex; its dual potentials come from the
    optimal spanning-tree basis and are shifted so that ``dual_g[0] == 0``.
    The entropic method runs log-domain Sinkhorn with regularization
    ``epsilon`` (relative to the largest cost entry). Its plan is biased
    towards the independent coupling by O(epsilon) and its potentials are
    only approximately dual feasible.
    """
    C = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost must be a matrix")
    m, n = C.shape
    a = _as_mass(a, m, "a")
    b = _as_mass(b, n, "b")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if abs(a.sum() - b.sum()) > FEASIBILITY_ATOL:
        raise TransportError(
            f"infeasible masses: source sums to {a.sum()!r}, target to {b.sum()!r}"
        )
    C = np.ascontiguousarray(C, dtype=float)
    if method == "exact":
        return _solve_exact(C, a, b, tol, max_iter)
    if method == "entropic":
        return _solve_sinkhorn(C, a, b, epsilon, tol, max_iter or 10_000)
    raise ValueError(f"unknown method {method!r}")


def _solve_exact(C, a, b, tol, max_iter) -> TransportSolution:
    m, n = C.shape
    scale = max(1.0, float(np.abs(C).max()))
    limit = max_iter if max_iter is not None else 50 * (m + n) * max(m, n) + 1000
    plan, u, v, iters, status = network_simplex(
        C, np.ascontiguousarray(a), np.ascontiguousarray(b), limit, 1e-13 * scale
    )
    if status != 0:
        raise TransportError(f"network simplex hit the iteration limit ({limit})")
    shift = v[0]
    f = u + shift
    g = v - shift
    objective = float(np.sum(C * plan))
    gap = objective - float(f @ a + g @ b)
    if gap > max(tol, 1e-12 * scale * max(m, n)):
        raise TransportError(f"duality gap {gap:.3e} above tolerance {tol:.1e}")
    return TransportSolution(plan, objective, f, g, "exact", gap, int(iters))


def _solve_sinkhorn(C, a, b, epsilon, tol, max_iter) -> TransportSolution:
    eps = epsilon * max(float(C.max()), 1e-12)
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    for it in range(1, max_iter + 1):
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        if it % 10 == 0 or it == max_iter:
            plan = np.exp((f[:, None] + g[None, :] - C) / eps)
            err = float(np.abs(plan.sum(axis=1) - a).max())
            if err < tol:
                break
    else:
        raise TransportError(f"sinkhorn did not reach tol={tol} in {max_iter} iterations")
    f = np.where(np.isfinite(f), f, 0.0)
    g = np.where(np.isfinite(g), g, 0.0)
    shift = g[0]
    f, g = f + shift, g - shift
    objective = float(np.sum(C * plan))
    gap = objective - float(f @ a + g @ b)
    return TransportSolution(plan, objective, f, g, "entropic", gap, it)


def wasserstein(
    mu: DiscreteMeasure, nu: DiscreteMeasure, label_penalty: float = 0.0, power: int = 1
) -> float:
    """Exact transport cost between two measures under :func:`build_cost`."""
    cost = build_cost(mu, nu, label_penalty, power)
    return solve(cost, mu.masses, nu.masses).objective


def calibrated_gradients(
    sol: TransportSolution, source_side: bool = True, allow_entropic: bool = False
) -> CalibratedScores:
    """Per-point calibrated gradient of the transport cost.

    ``score_i = f_i - sum_{j != i} f_j / (m - 1)`` is the first-order change of
    the cost when unit mass moves onto point ``i`` and is removed evenly from
    every other point. Scores sum to zero and ignore the constant-shift
    ambiguity of the potentials.
    """
    if sol.method != "exact" and not allow_entropic:
        raise ValueError("calibrated gradients need exact duals; pass allow_entropic=True to override")
    f = np.asarray(sol.dual_f if source_side else sol.dual_g, dtype=float)
    m = f.shape[0]
    if m < 2:
        raise ValueError("calibrated gradients need at least two points")
    scores = (m * f - f.sum()) / (m - 1)
    scores -= scores.mean()
    return CalibratedScores(scores, source_side)


def select_top_k(scores: Union[CalibratedScores, np.ndarray], k: int) -> list[int]:
    """Indices of the ``k`` lowest scores (most valuable first, ties by index)."""
    s = scores.scores if isinstance(scores, CalibratedScores) else np.asarray(scores)
    if not 0 <= k <= s.shape[0]:
        raise ValueError(f"k={k} outside [0, {s.shape[0]}]")
    order = np.lexsort((np.arange(s.shape[0]), s))
    return [int(i) for i in order[:k]]
