"""Network simplex for the dense transportation problem.

Nodes 0..m-1 are supplies (rows), m..m+n-1 are demands (columns). The basis
is a spanning tree with m+n-1 arcs stored in fixed slots; pivots swap the
leaving arc's slot for the entering arc. Potentials are recomputed by BFS
from row 0 after each pivot, which keeps the tree bookkeeping trivial and is
cheap next to pricing.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit(cache=True)
def _initial_basis(C, a, b, arc_r, arc_c, flow):
    # Matrix-minimum allocation; every allocation exhausts a row or a column,
    # so the allocated arcs are a forest. Kruskal completes it with zero arcs.
    m, n = C.shape
    order = np.argsort(C.ravel(), kind="mergesort")
    sup = a.copy()
    dem = b.copy()
    row_done = sup <= 0.0
    col_done = dem <= 0.0
    uf = np.arange(m + n)
    used = np.zeros(m * n, dtype=np.bool_)
    nb = 0
    for t in range(m * n):
        k = order[t]
        i = k // n
        j = k - i * n
        if row_done[i] or col_done[j]:
            continue
        s = sup[i]
        d = dem[j]
        if s < d:
            x = s
            sup[i] = 0.0
            dem[j] = d - s
            row_done[i] = True
        elif d < s:
            x = d
            dem[j] = 0.0
            sup[i] = s - d
            col_done[j] = True
        else:
            x = s
            sup[i] = 0.0
            dem[j] = 0.0
            row_done[i] = True
            col_done[j] = True
        arc_r[nb] = i
        arc_c[nb] = j
        flow[nb] = x
        used[k] = True
        ri = _find(uf, i)
        rj = _find(uf, m + j)
        uf[ri] = rj
        nb += 1
    for t in range(m * n):
        if nb == m + n - 1:
            break
        k = order[t]
        if used[k]:
            continue
        i = k // n
        j = k - i * n
        ri = _find(uf, i)
        rj = _find(uf, m + j)
        if ri != rj:
            uf[ri] = rj
            arc_r[nb] = i
            arc_c[nb] = j
            flow[nb] = 0.0
            used[k] = True
            nb += 1
    return nb


@njit(cache=True)
def _link(head, nxt, prv, node, h):
    nxt[h] = head[node]
    prv[h] = -1
    if head[node] >= 0:
        prv[head[node]] = h
    head[node] = h


@njit(cache=True)
def _unlink(head, nxt, prv, node, h):
    if prv[h] >= 0:
        nxt[prv[h]] = nxt[h]
    else:
        head[node] = nxt[h]
    if nxt[h] >= 0:
        prv[nxt[h]] = prv[h]
    nxt[h] = -1
    prv[h] = -1


@njit(cache=True)
def _potentials(C, m, n, arc_r, arc_c, head, nxt, u, v, par_slot, par_node, depth, queue):
    # half-edge 2*s sits at row arc_r[s], 2*s+1 at column node m+arc_c[s]
    total = m + n
    for x in range(total):
        depth[x] = -1
    depth[0] = 0
    par_slot[0] = -1
    par_node[0] = -1
    u[0] = 0.0
    qh = 0
    qt = 1
    queue[0] = 0
    while qh < qt:
        x = queue[qh]
        qh += 1
        h = head[x]
        while h >= 0:
            s = h >> 1
            r = arc_r[s]
            c = arc_c[s]
            if x < m:
                y = m + c
                if depth[y] < 0:
                    v[c] = C[r, c] - u[r]
                    depth[y] = depth[x] + 1
                    par_slot[y] = s
                    par_node[y] = x
                    queue[qt] = y
                    qt += 1
            else:
                y = r
                if depth[y] < 0:
                    u[r] = C[r, c] - v[c]
                    depth[y] = depth[x] + 1
                    par_slot[y] = s
                    par_node[y] = x
                    queue[qt] = y
                    qt += 1
            h = nxt[h]
    return qt


@njit(cache=True)
def network_simplex(C, a, b, max_iter, rc_tol):
    """Solve min <C, P> over couplings of (a, b).

    Returns (plan, u, v, iterations, status) with status 0 = optimal,
    1 = iteration limit reached.
    """
    m, n = C.shape
    total = m + n
    nb_max = total - 1
    arc_r = np.zeros(nb_max, dtype=np.int64)
    arc_c = np.zeros(nb_max, dtype=np.int64)
    flow = np.zeros(nb_max)
    _initial_basis(C, a, b, arc_r, arc_c, flow)

    head = np.full(total, -1, dtype=np.int64)
    nxt = np.full(2 * nb_max, -1, dtype=np.int64)
    prv = np.full(2 * nb_max, -1, dtype=np.int64)
    for s in range(nb_max):
        _link(head, nxt, prv, arc_r[s], 2 * s)
        _link(head, nxt, prv, m + arc_c[s], 2 * s + 1)

    u = np.zeros(m)
    v = np.zeros(n)
    par_slot = np.zeros(total, dtype=np.int64)
    par_node = np.zeros(total, dtype=np.int64)
    depth = np.zeros(total, dtype=np.int64)
    queue = np.zeros(total, dtype=np.int64)
    side_i = np.zeros(total, dtype=np.int64)
    side_j = np.zeros(total, dtype=np.int64)

    n_arcs = m * n
    block = max(int(np.sqrt(n_arcs)), 16)
    block = min(block, n_arcs)
    next_arc = 0
    it = 0
    status = 1
    while it < max_iter:
        _potentials(C, m, n, arc_r, arc_c, head, nxt, u, v, par_slot, par_node, depth, queue)

        # block pricing: first block holding a violated arc, most negative within it
        best = -rc_tol
        ei = -1
        ej = -1
        checked = 0
        k = next_arc
        while checked < n_arcs:
            lim = min(block, n_arcs - checked)
            for _ in range(lim):
                i = k // n
                j = k - i * n
                rc = C[i, j] - u[i] - v[j]
                if rc < best:
                    best = rc
                    ei = i
                    ej = j
                k += 1
                if k == n_arcs:
                    k = 0
            checked += lim
            if ei >= 0:
                break
        next_arc = k
        if ei < 0:
            status = 0
            break

        # tree path between row ei and column node m+ej
        x = ei
        y = m + ej
        ni = 0
        nj = 0
        while depth[x] > depth[y]:
            side_i[ni] = x
            ni += 1
            x = par_node[x]
        while depth[y] > depth[x]:
            side_j[nj] = y
            nj += 1
            y = par_node[y]
        while x != y:
            side_i[ni] = x
            ni += 1
            x = par_node[x]
            side_j[nj] = y
            nj += 1
            y = par_node[y]

        # Walk the cycle from the apex: down the row side, across the entering
        # arc, up the column side. Leaving from a column node is a backward
        # traversal (flow decreases). Ties go to the last blocking arc.
        theta = np.inf
        leave = -1
        for t in range(ni - 1, -1, -1):
            child = side_i[t]
            s = par_slot[child]
            parent = par_node[child]
            if parent >= m:
                if flow[s] <= theta:
                    theta = flow[s]
                    leave = s
        for t in range(nj):
            child = side_j[t]
            s = par_slot[child]
            if child >= m:
                if flow[s] <= theta:
                    theta = flow[s]
                    leave = s

        for t in range(ni):
            child = side_i[t]
            s = par_slot[child]
            if par_node[child] >= m:
                flow[s] -= theta
            else:
                flow[s] += theta
        for t in range(nj):
            child = side_j[t]
            s = par_slot[child]
            if child >= m:
                flow[s] -= theta
            else:
                flow[s] += theta

        _unlink(head, nxt, prv, arc_r[leave], 2 * leave)
        _unlink(head, nxt, prv, m + arc_c[leave], 2 * leave + 1)
        arc_r[leave] = ei
        arc_c[leave] = ej
        flow[leave] = theta
        _link(head, nxt, prv, ei, 2 * leave)
        _link(head, nxt, prv, m + ej, 2 * leave + 1)
        it += 1

    if status != 0:
        _potentials(C, m, n, arc_r, arc_c, head, nxt, u, v, par_slot, par_node, depth, queue)

    plan = np.zeros((m, n))
    for s in range(nb_max):
        f = flow[s]
        if f > 0.0:
            plan[arc_r[s], arc_c[s]] += f
    return plan, u, v, it, status
