"""Independent reference computations used to freeze expected values.

Nothing here imports the package under test.
"""

from functools import lru_cache

import numpy as np


def transport_vertex_min(C, supply, demand):
    """Minimum of <C, P> over every vertex of the transportation polytope.

    ``supply``/``demand`` are integer masses with equal totals (rational masses
    scaled by their common denominator). Every vertex has a forest support, and
    a leaf line of that forest carries its whole remaining mass on one cell, so
    repeatedly choosing a cell and allocating ``min(s_i, d_j)`` reaches every
    vertex. The recursion enumerates all such choices, memoized on the residual
    masses.
    """
    C = np.asarray(C, dtype=float)
    m, n = C.shape
    supply = tuple(int(x) for x in supply)
    demand = tuple(int(x) for x in demand)
    total = sum(supply)
    assert total == sum(demand)

    @lru_cache(maxsize=None)
    def best(s, d):
        rows = [i for i in range(m) if s[i] > 0]
        cols = [j for j in range(n) if d[j] > 0]
        if not rows or not cols:
            return 0.0
        out = np.inf
        for i in rows:
            for j in cols:
                x = min(s[i], d[j])
                s2 = list(s)
                d2 = list(d)
                s2[i] -= x
                d2[j] -= x
                val = C[i, j] * x + best(tuple(s2), tuple(d2))
                if val < out:
                    out = val
        return out

    return best(supply, demand) / total


def random_rational_instance(rng, max_size=6, denominator=12):
    """Random (C, supply, demand) with masses k/denominator, every mass > 0."""
    m = int(rng.integers(1, max_size + 1))
    n = int(rng.integers(1, max_size + 1))
    q = max(denominator, m, n)
    supply = rng.multinomial(q - m, np.ones(m) / m) + 1
    demand = rng.multinomial(q - n, np.ones(n) / n) + 1
    C = rng.random((m, n))
    return C, supply, demand


def pooled_shift_gradient(solve_value, a, i, delta):
    """Finite difference of a transport value when mass ``delta`` moves onto
    point ``i`` and is taken evenly from all other points."""
    m = a.shape[0]
    step = np.full(m, -delta / (m - 1))
    step[i] = delta
    return (solve_value(a + step) - solve_value(a)) / delta
