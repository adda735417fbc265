"""Performance estimators over (mixing ratio, distance, budget), two-scale
projection to larger budgets, and mixing-ratio search on the simplex.

Parameter layouts (``m`` sources):

=====================  =====================================================
kind                   params
=====================  =====================================================
affine_combinewad      ``[a1, a0]``; ``a1*W + a0``
enhanced_combinewad    ``[b2 (m), b1 (m), b0, c1 (m)]``;
                       ``sum_i (b2_i p_i^2 + b1_i p_i + b0) W + c1 . p``
delta_form             ``[v_ref, w_ref, p_ref (m), d (m), e]``;
                       ``v_ref + d . (p - p_ref) + e (W - w_ref)``
linear                 ``[a, b (m), c]``; ``a log N + b . p + c``
pseudo_quadratic       ``[c2 (m), c1 (m), c0, b]``;
                       ``sum_i (c2_i p_i^2 + c1_i p_i + c0) + b log N``
quadratic              pseudo_quadratic plus ``c3`` (lower triangle incl.
                       diagonal, row-major) before ``b``
rational               ``[C (m*m row-major), b]``;
                       ``sum_i 1 / max(C_i . p, 1e-6) + b log N``
aggwad                 ``[a, b (m), c]``; ``a W + b . p + c`` with ``W`` the
                       weighted per-source distance
=====================  =====================================================
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

KINDS = (
    "affine_combinewad",
    "enhanced_combinewad",
    "delta_form",
    "linear",
    "pseudo_quadratic",
    "quadratic",
    "rational",
    "aggwad",
)
SINGLE_SCALE_KINDS = ("affine_combinewad", "enhanced_combinewad", "delta_form")
SIMPLEX_ATOL = 1e-9
DENOM_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class TrialRecord:
    p: np.ndarray
    n: int
    w: float
    v: float
    run_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(-1)
        if np.any(p < -SIMPLEX_ATOL) or abs(p.sum() - 1.0) > SIMPLEX_ATOL:
            raise ValueError(f"p={p.tolist()} is not on the simplex")
        if self.n < 1:
            raise ValueError("budget must be positive")
        if not self.w >= 0:
            raise ValueError("distance must be nonnegative")
        if not 0.0 <= self.v <= 1.0:
            raise ValueError("performance must lie in [0, 1]")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "v", float(self.v))

    def to_json(self) -> str:
        return json.dumps(
            {"run_id": self.run_id, "p": self.p.tolist(), "n": self.n, "w": self.w, "v": self.v},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        obj = json.loads(line)
        return cls(obj["p"], obj["n"], obj["w"], obj["v"], str(obj["run_id"]))


def save_records(path, records: Sequence[TrialRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_records(path) -> list[TrialRecord]:
    with open(path) as fh:
        return [TrialRecord.from_json(line) for line in fh if line.strip()]


def num_params(kind: str, m: int) -> int:
    return {
        "affine_combinewad": 2,
        "enhanced_combinewad": 3 * m + 1,
        "delta_form": 2 * m + 3,
        "linear": m + 2,
        "pseudo_quadratic": 2 * m + 2,
        "quadratic": 2 * m + 2 + m * (m + 1) // 2,
        "rational": m * m + 1,
        "aggwad": m + 2,
    }[kind]


@dataclass(frozen=True, eq=False)
class FittedEstimator:
    kind: str
    params: np.ndarray
    m: int
    n_fit: int
    r2_train: float = float("nan")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        params = np.asarray(self.params, dtype=float).reshape(-1)
        if params.size != num_params(self.kind, self.m):
            raise ValueError(f"{self.kind} with m={self.m} takes {num_params(self.kind, self.m)} params")
        if not np.all(np.isfinite(params)):
            raise ValueError("params must be finite")
        object.__setattr__(self, "params", params)


def _tril_pairs(m):
    return [(i, j) for i in range(m) for j in range(i + 1)]


def _features(kind: str, p: np.ndarray, w: float, n: int, m: int) -> np.ndarray:
    """Design row for the kinds that are linear in their parameters."""
    logn = math.log(n)
    if kind == "affine_combinewad":
        return np.array([w, 1.0])
    if kind == "enhanced_combinewad":
        return np.concatenate([w * p**2, w * p, [m * w], p])
    if kind in ("linear", "aggwad"):
        head = logn if kind == "linear" else w
        return np.concatenate([[head], p, [1.0]])
    if kind in ("pseudo_quadratic", "quadratic"):
        parts = [p**2, p, [float(m)]]
        if kind == "quadratic":
            parts.append([p[i] * p[j] for i, j in _tril_pairs(m)])
        parts.append([logn])
        return np.concatenate(parts)
    raise ValueError(f"{kind} has no linear design")


def _raw_predict(est: FittedEstimator, p: np.ndarray, w: float, n: int) -> float:
    m = est.m
    if est.kind == "delta_form":
        v_ref, w_ref = est.params[:2]
        p_ref = est.params[2:2 + m]
        d = est.params[2 + m:2 + 2 * m]
        e = est.params[-1]
        return float(v_ref + d @ (p - p_ref) + e * (w - w_ref))
    if est.kind == "rational":
        C = est.params[:-1].reshape(m, m)
        return float(np.sum(1.0 / np.maximum(C @ p, DENOM_FLOOR)) + est.params[-1] * math.log(n))
    return float(_features(est.kind, p, w, n, m) @ est.params)


def _check_p(p, m):
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != m:
        raise ValueError(f"mixing ratio has {p.size} entries, estimator expects {m}")
    return p


def predict(est: FittedEstimator, p, w: float, n: Optional[int] = None) -> float:
    """Closed-form prediction clamped to [0, 1]."""
    p = _check_p(p, est.m)
    return min(1.0, max(0.0, _raw_predict(est, p, w, n or est.n_fit)))


def _solve_ridge(X: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge least squares on standardized columns, returned in original units.

    When a nonzero constant column exists it serves as an unpenalized
    intercept and every other column is centered before scaling.
    """
    k = X.shape[1]
    const = np.flatnonzero(np.all(X == X[0], axis=0) & (X[0] != 0))
    icpt = int(const[0]) if const.size else None
    shift = np.zeros(k)
    if icpt is not None:
        shift = X.mean(axis=0)
        shift[const] = 0.0
    Xc = X - shift
    scale = np.sqrt(np.mean(Xc**2, axis=0))
    scale[scale == 0] = 1.0
    Xs = Xc / scale
    if ridge == 0:
        if np.linalg.matrix_rank(Xs) < k:
            raise ValueError("rank-deficient design; use ridge > 0")
        beta = np.linalg.lstsq(Xs, y, rcond=None)[0]
    else:
        penalty = np.full(k, ridge)
        if icpt is not None:
            penalty[icpt] = 0.0
        beta = np.linalg.solve(Xs.T @ Xs + np.diag(penalty), Xs.T @ y)
    coef = beta / scale
    if icpt is not None:
        coef[icpt] -= (coef @ shift) / X[0, icpt]
    return coef


def _fit_rational(P, logn, V, m, ridge):
    """Multi-start ridge-penalized solve, then an unpenalized polish from the
    best start (the penalty only selects among starts)."""

    def resid(theta, lam):
        C = theta[:-1].reshape(m, m)
        pred = np.sum(1.0 / np.maximum(P @ C.T, DENOM_FLOOR), axis=1) + theta[-1] * logn
        return np.concatenate([pred - V, math.sqrt(lam) * theta])

    tight = dict(method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
    best = None
    for s in (1.0, 3.0, 10.0, 30.0):
        for off in (0.0, 0.3, 1.0):
            x0 = np.concatenate([(s * (np.eye(m) + off)).ravel(), [0.0]])
            res = least_squares(resid, x0, args=(ridge,), **tight)
            if best is None or res.cost < best.cost:
                best = res
    polished = least_squares(resid, best.x, args=(0.0,), **tight)
    return polished.x


def fit(
    records: Sequence[TrialRecord],
    kind: str,
    ridge: float = 1e-6,
    reference: int = 0,
) -> FittedEstimator:
    """Least-squares fit of one estimator family.

    Columns are rescaled to unit RMS before the ridge penalty is applied, and
    coefficients are returned in original units. ``delta_form`` regresses
    ``v - v_ref`` on ``(p - p_ref, w - w_ref)`` against ``records[reference]``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    if not records:
        raise ValueError("no records to fit")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    m = records[0].p.size
    if any(r.p.size != m for r in records):
        raise ValueError("records disagree on the number of sources")
    budgets = sorted({r.n for r in records})
    if kind in SINGLE_SCALE_KINDS and len(budgets) > 1:
        raise ValueError(f"{kind} is fit at one budget, records span {budgets}")
    n_fit = max(budgets, key=lambda b: sum(r.n == b for r in records))
    k = num_params(kind, m)
    if ridge == 0 and len(records) < k:
        raise ValueError(f"{kind} needs at least {k} records without ridge")

    P = np.array([r.p for r in records])
    W = np.array([r.w for r in records])
    V = np.array([r.v for r in records])
    N = np.array([r.n for r in records])

    if kind == "delta_form":
        ref = records[reference]
        mask = np.arange(len(records)) != reference
        X = np.column_stack([P[mask] - ref.p, W[mask] - ref.w])
        if X.shape[0] == 0:
            raise ValueError("delta_form needs at least two records")
        coef = _solve_ridge(X, V[mask] - ref.v, ridge)
        params = np.concatenate([[ref.v, ref.w], ref.p, coef])
    elif kind == "rational":
        params = _fit_rational(P, np.log(N), V, m, ridge)
    else:
        X = np.array([_features(kind, r.p, r.w, r.n, m) for r in records])
        params = _solve_ridge(X, V, ridge)

    est = FittedEstimator(kind, params, m, n_fit)
    return FittedEstimator(kind, params, m, n_fit, r_squared(est, records))


def r_squared(est: FittedEstimator, records: Sequence[TrialRecord]) -> float:
    """Coefficient of determination of (unclamped) predictions against ``v``.

    Zero-variance targets give 0.0 with a warning.
    """
    if not records:
        raise ValueError("no records")
    V = np.array([r.v for r in records])
    pred = np.array([_raw_predict(est, _check_p(r.p, est.m), r.w, r.n) for r in records])
    ss_tot = float(np.sum((V - V.mean()) ** 2))
    if np.all(V == V[0]):
        warnings.warn("targets have zero variance; r^2 reported as 0", stacklevel=2)
        return 0.0
    return 1.0 - float(np.sum((V - pred) ** 2)) / ss_tot


def project_scale(v_i: float, v_j: float, n_i: float, n_j: float, n: float) -> float:
    """Log-linear extrapolation through ``(n_i, v_i)`` and ``(n_j, v_j)``."""
    if n_i <= 0 or n_j <= 0 or n <= 0:
        raise ValueError("budgets must be positive")
    if n_i == n_j:
        raise ValueError("the two fit scales must differ")
    if n == n_j:
        return float(v_j)
    if n == n_i:
        return float(v_i)
    return (math.log(n / n_i) * v_j - math.log(n / n_j) * v_i) / math.log(n_j / n_i)


def _partials(est: FittedEstimator, p: np.ndarray, w: float) -> tuple[np.ndarray, float]:
    """(d f / d p, d f / d W) of the unclamped form."""
    m = est.m
    th = est.params
    kind = est.kind
    if kind == "affine_combinewad":
        return np.zeros(m), float(th[0])
    if kind == "enhanced_combinewad":
        b2, b1, b0, c1 = th[:m], th[m:2 * m], th[2 * m], th[2 * m + 1:]
        return (2 * b2 * p + b1) * w + c1, float(b2 @ p**2 + b1 @ p + m * b0)
    if kind == "delta_form":
        return th[2 + m:2 + 2 * m].copy(), float(th[-1])
    if kind == "linear":
        return th[1:1 + m].copy(), 0.0
    if kind in ("pseudo_quadratic", "quadratic"):
        grad = 2 * th[:m] * p + th[m:2 * m]
        if kind == "quadratic":
            for c, (i, j) in zip(th[2 * m + 1:-1], _tril_pairs(m)):
                if i == j:
                    grad[i] += 2 * c * p[i]
                else:
                    grad[i] += c * p[j]
                    grad[j] += c * p[i]
        return grad, 0.0
    if kind == "rational":
        C = th[:-1].reshape(m, m)
        s = C @ p
        live = s > DENOM_FLOOR
        return -(C[live] / s[live, None] ** 2).sum(axis=0), 0.0
    raise ValueError("aggwad gradients need per-source distances; not supported")


def ratio_gradient(est: FittedEstimator, p, cw, n: Optional[int] = None) -> np.ndarray:
    """Chain rule through the estimator: ``df/dp + df/dW * dW/dp``, with
    ``dW/dp`` taken from ``cw.per_source_scores``."""
    p = _check_p(p, est.m)
    scores = np.asarray(cw.per_source_scores, dtype=float)
    if scores.size != est.m:
        raise ValueError(f"{scores.size} source scores for an estimator over {est.m} sources")
    dp, dw = _partials(est, p, cw.value)
    return dp + dw * scores


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = ks[u - css / ks > 0][-1]
    out = np.maximum(v - css[rho - 1] / rho, 0.0)
    return out / out.sum()


@dataclass
class RatioSearch:
    trajectory: list = field(default_factory=list)
    stopped_early: bool = False
    reason: str = ""

    @property
    def p_final(self) -> np.ndarray:
        return self.trajectory[-1][0]


def _surrogate(ests, wfns, n, p):
    """Projected prediction and its gradient at ``p``."""
    vals, grads = [], []
    for est, wfn in zip(ests, wfns):
        cw = wfn(p)
        vals.append(_raw_predict(est, p, cw.value, est.n_fit))
        grads.append(ratio_gradient(est, p, cw))
    if len(ests) == 1:
        return vals[0], grads[0]
    n_i, n_j = ests[0].n_fit, ests[1].n_fit
    v = project_scale(vals[0], vals[1], n_i, n_j, n)
    if n == n_j:
        return v, grads[1]
    if n == n_i:
        return v, grads[0]
    span = math.log(n_j / n_i)
    g = (math.log(n / n_i) * grads[1] - math.log(n / n_j) * grads[0]) / span
    return v, g


def optimize_ratio(
    est_pair: Sequence[Optional[FittedEstimator]],
    n: int,
    p0,
    steps: int,
    w_fns: Sequence[Callable],
    alpha0: float = 0.1,
    max_halvings: int = 20,
    zero_tol: float = 1e-12,
) -> RatioSearch:
    """Projected gradient ascent of the projected performance surrogate.

    ``w_fns[k](p)`` returns the CombineWad result of the fixed-seed subset at
    the budget ``est_pair[k]`` was fit at. Step ``t`` uses ``alpha0/sqrt(t+1)``
    and halves until the surrogate does not decrease; a step that cannot be
    made to ascend is skipped. More than five consecutive zero-gradient steps
    end the search early. The trajectory stores clamped predictions.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    ests = [e for e in est_pair if e is not None]
    if not ests or len(ests) > 2 or len(w_fns) != len(ests):
        raise ValueError("need one or two estimators with one distance function each")
    m = ests[0].m
    p = np.asarray(p0, dtype=float).reshape(-1)
    if p.size != m or np.any(p < -SIMPLEX_ATOL) or abs(p.sum() - 1.0) > SIMPLEX_ATOL:
        raise ValueError("p0 must lie on the simplex")

    def clamp(x):
        return min(1.0, max(0.0, x))

    out = RatioSearch()
    v, g = _surrogate(ests, w_fns, n, p)
    out.trajectory.append((p.copy(), clamp(v)))
    zero_run = 0
    for t in range(steps):
        direction = project_simplex(p + g) - p
        if np.max(np.abs(direction)) <= zero_tol:
            zero_run += 1
            out.trajectory.append((p.copy(), clamp(v)))
            if zero_run > 5:
                out.stopped_early = True
                out.reason = f"zero gradient for {zero_run} consecutive steps"
                break
            continue
        zero_run = 0
        alpha = alpha0 / math.sqrt(t + 1)
        for _ in range(max_halvings + 1):
            cand = project_simplex(p + alpha * g)
            v_new, g_new = _surrogate(ests, w_fns, n, cand)
            if v_new >= v:
                p, v, g = cand, v_new, g_new
                break
            alpha /= 2
        out.trajectory.append((p.copy(), clamp(v)))
    return out


def min_budget_for_target(
    v_i: float, v_j: float, n_i: int, n_j: int, target: float, lo: int, hi: int
) -> Optional[int]:
    """Smallest integer budget in ``[lo, hi]`` whose projected performance
    reaches ``target``, by bisection; None when ``hi`` falls short."""
    if lo < 1 or hi < lo:
        raise ValueError("need 1 <= lo <= hi")
    if v_j < v_i:
        return lo if project_scale(v_i, v_j, n_i, n_j, lo) >= target else None
    if project_scale(v_i, v_j, n_i, n_j, hi) < target:
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if project_scale(v_i, v_j, n_i, n_j, mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo
