"""Exact s-t min cut (Boykov-Kolmogorov) and alpha-expansion for Potts energies.

The Potts energy of a labeling ``l`` on a graph with node costs ``unary``
(shape ``(n, k)``) and undirected weighted edges is::

    E(l) = sum_i unary[i, l_i] + sum_(i,j) w_ij [l_i != l_j]
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import NonSubmodular


_FREE, _SRC, _SNK = 0, 1, 2
_NONE, _TERMINAL, _ORPHAN = -1, -2, -3


@njit(cache=True)
def _push(queue, flags, tail_pos, n_slots, v):
    if not flags[v]:
        flags[v] = True
        queue[tail_pos % n_slots] = v
        tail_pos += 1
    return tail_pos


@njit(cache=True)
def _origin_distance(parent, head, ts, dist, clock, u):
    """Path length from ``u`` to its terminal, or -1 when ``u`` hangs off an orphan.

    Nodes already verified during the current ``clock`` tick short-circuit the
    walk; on success the walked path is stamped with its distances.
    """
    d = 0
    j = u
    while True:
        if ts[j] == clock:
            d += dist[j]
            break
        a = parent[j]
        d += 1
        if a == _TERMINAL:
            ts[j] = clock
            dist[j] = 1
            break
        if a < 0:
            return -1
        j = head[a]
    total = d
    j = u
    while ts[j] != clock:
        ts[j] = clock
        dist[j] = d
        d -= 1
        j = head[parent[j]]
    return total


@njit(cache=True)
def _boykov_kolmogorov(n, start, head, tail, cap, rev, tr, eps):
    """Max flow by growing search trees from both terminals.

    ``tr[v] > 0`` is residual capacity source -> v, ``tr[v] < 0`` residual
    capacity v -> sink.  ``parent[v]`` is the arc from ``v`` to its parent.
    Returns the flow value and a flag per node telling whether it still
    reaches the sink in the residual graph.
    """
    tree = np.zeros(n, np.int8)
    parent = np.full(n, _NONE, np.int64)
    slots = n + 1
    active = np.empty(slots, np.int64)
    is_active = np.zeros(n, np.bool_)
    ah, at = 0, 0
    orphans = np.empty(slots, np.int64)
    is_orphan = np.zeros(n, np.bool_)
    ts = np.zeros(n, np.int64)
    dist = np.ones(n, np.int64)
    clock = 0
    for v in range(n):
        if tr[v] > eps:
            tree[v] = _SRC
            parent[v] = _TERMINAL
            at = _push(active, is_active, at, slots, v)
        elif tr[v] < -eps:
            tree[v] = _SNK
            parent[v] = _TERMINAL
            at = _push(active, is_active, at, slots, v)
    flow = 0.0
    while ah < at:
        v = active[ah % slots]
        ah += 1
        is_active[v] = False
        if tree[v] == _FREE:
            continue
        bridge = -1
        for a in range(start[v], start[v + 1]):
            u = head[a]
            if tree[v] == _SRC:
                if cap[a] > eps:
                    if tree[u] == _FREE:
                        tree[u] = _SRC
                        parent[u] = rev[a]
                        ts[u] = ts[v]
                        dist[u] = dist[v] + 1
                        at = _push(active, is_active, at, slots, u)
                    elif tree[u] == _SNK:
                        bridge = a
                        break
                    elif ts[u] <= ts[v] and dist[u] > dist[v]:
                        parent[u] = rev[a]
                        ts[u] = ts[v]
                        dist[u] = dist[v] + 1
            else:
                if cap[rev[a]] > eps:
                    if tree[u] == _FREE:
                        tree[u] = _SNK
                        parent[u] = rev[a]
                        ts[u] = ts[v]
                        dist[u] = dist[v] + 1
                        at = _push(active, is_active, at, slots, u)
                    elif tree[u] == _SRC:
                        bridge = rev[a]
                        break
                    elif ts[u] <= ts[v] and dist[u] > dist[v]:
                        parent[u] = rev[a]
                        ts[u] = ts[v]
                        dist[u] = dist[v] + 1
        if bridge < 0:
            continue
        at = _push(active, is_active, at, slots, v)

        p, q = tail[bridge], head[bridge]
        f = cap[bridge]
        x = p
        while parent[x] != _TERMINAL:
            a = parent[x]
            if cap[rev[a]] < f:
                f = cap[rev[a]]
            x = head[a]
        if tr[x] < f:
            f = tr[x]
        x = q
        while parent[x] != _TERMINAL:
            a = parent[x]
            if cap[a] < f:
                f = cap[a]
            x = head[a]
        if -tr[x] < f:
            f = -tr[x]

        clock += 1
        oh, ot = 0, 0
        cap[bridge] -= f
        cap[rev[bridge]] += f
        x = p
        while parent[x] != _TERMINAL:
            a = parent[x]
            cap[rev[a]] -= f
            cap[a] += f
            nxt = head[a]
            if cap[rev[a]] <= eps:
                parent[x] = _ORPHAN
                ot = _push(orphans, is_orphan, ot, slots, x)
            x = nxt
        tr[x] -= f
        if tr[x] <= eps:
            parent[x] = _ORPHAN
            ot = _push(orphans, is_orphan, ot, slots, x)
        x = q
        while parent[x] != _TERMINAL:
            a = parent[x]
            cap[a] -= f
            cap[rev[a]] += f
            nxt = head[a]
            if cap[a] <= eps:
                parent[x] = _ORPHAN
                ot = _push(orphans, is_orphan, ot, slots, x)
            x = nxt
        tr[x] += f
        if tr[x] >= -eps:
            parent[x] = _ORPHAN
            ot = _push(orphans, is_orphan, ot, slots, x)
        flow += f

        while oh < ot:
            w = orphans[oh % slots]
            oh += 1
            is_orphan[w] = False
            side = tree[w]
            best_a, best_d = -1, 0
            for a in range(start[w], start[w + 1]):
                u = head[a]
                if tree[u] != side or parent[u] == _NONE:
                    continue
                if side == _SRC:
                    ok = cap[rev[a]] > eps
                else:
                    ok = cap[a] > eps
                if ok:
                    d = _origin_distance(parent, head, ts, dist, clock, u)
                    if d >= 0 and (best_a < 0 or d < best_d):
                        best_a, best_d = a, d
            if best_a >= 0:
                parent[w] = best_a
                ts[w] = clock
                dist[w] = best_d + 1
                continue
            for a in range(start[w], start[w + 1]):
                u = head[a]
                if tree[u] != side:
                    continue
                if side == _SRC:
                    ok = cap[rev[a]] > eps
                else:
                    ok = cap[a] > eps
                if ok:
                    at = _push(active, is_active, at, slots, u)
                if parent[u] >= 0 and head[parent[u]] == w:
                    parent[u] = _ORPHAN
                    ot = _push(orphans, is_orphan, ot, slots, u)
            tree[w] = _FREE
            parent[w] = _NONE

    # nodes that still reach the sink; everything else stays with the source
    on_sink = np.zeros(n, np.bool_)
    queue = np.empty(n, np.int64)
    qt = 0
    for v in range(n):
        if tr[v] < -eps:
            on_sink[v] = True
            queue[qt] = v
            qt += 1
    qh = 0
    while qh < qt:
        v = queue[qh]
        qh += 1
        for a in range(start[v], start[v + 1]):
            u = head[a]
            if not on_sink[u] and cap[rev[a]] > eps:
                on_sink[u] = True
                queue[qt] = u
                qt += 1
    return flow, on_sink


def min_cut(cost0, cost1, edges, cap_fwd, cap_bwd=None):
    """Minimize ``sum_i cost_i(x_i) + sum_e cap_fwd[e][x_i=0, x_j=1] + cap_bwd[e][x_i=1, x_j=0]``.

    ``cost0``/``cost1`` are per-node costs of ``x = 0`` / ``x = 1`` and may be
    negative; pairwise capacities must be non-negative.  Returns the
    minimizing binary vector (ties resolved toward ``x = 0``) and its energy.
    """
    cost0 = np.asarray(cost0, dtype=np.float64)
    cost1 = np.asarray(cost1, dtype=np.float64)
    n = cost0.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    cap_fwd = np.asarray(cap_fwd, dtype=np.float64)
    cap_bwd = np.zeros_like(cap_fwd) if cap_bwd is None else np.asarray(cap_bwd, dtype=np.float64)
    if (cap_fwd < 0).any() or (cap_bwd < 0).any():
        raise NonSubmodular("pairwise capacities must be non-negative")

    # x = 1 puts a node on the sink side and cuts source -> node
    terminal = cost1 - cost0
    m = edges.shape[0]
    tails = np.concatenate([edges[:, 0], edges[:, 1]])
    heads = np.concatenate([edges[:, 1], edges[:, 0]])
    caps = np.concatenate([cap_fwd, cap_bwd])
    pair = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    order = np.argsort(tails, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(order.shape[0])
    tails, heads, caps = tails[order], heads[order], caps[order].copy()
    rev = inv[pair[order]]
    start = np.zeros(n + 1, dtype=np.int64)
    np.add.at(start, tails + 1, 1)
    start = np.cumsum(start)
    scale = max(float(np.abs(terminal).max(initial=0.0)), float(caps.max(initial=0.0)), 1e-300)
    _, on_sink = _boykov_kolmogorov(n, start, heads, tails, caps, rev, terminal.copy(),
                                    1e-13 * scale)
    x = on_sink.astype(np.int8)
    energy = float(np.where(x == 1, cost1, cost0).sum()
                   + (cap_fwd * ((x[edges[:, 0]] == 0) & (x[edges[:, 1]] == 1))).sum()
                   + (cap_bwd * ((x[edges[:, 0]] == 1) & (x[edges[:, 1]] == 0))).sum())
    return x, energy


def potts_energy(labels, unary, edges, weights) -> float:
    labels = np.asarray(labels)
    edges = np.asarray(edges).reshape(-1, 2)
    data = np.take_along_axis(unary, labels[:, None].astype(np.int64), axis=1).sum()
    cut = (np.asarray(weights) * (labels[edges[:, 0]] != labels[edges[:, 1]])).sum()
    return float(data + cut)


def _binary_potts(unary, edges, weights):
    w = np.asarray(weights, dtype=np.float64)
    x, _ = min_cut(unary[:, 0], unary[:, 1], edges, w, w)
    return x.astype(np.int64)


def _expansion_move(labels, alpha, unary, edges, weights):
    n = labels.shape[0]
    lp, lq = labels[edges[:, 0]], labels[edges[:, 1]]
    a = weights * (lp != lq)
    b = weights * (lp != alpha)
    c = weights * (lq != alpha)
    # E(xp, xq) = A + (C - A) xp + (D - C) xq + (B + C - A - D)(1 - xp) xq, with D = 0
    cost0 = unary[np.arange(n), labels].astype(np.float64)
    cost1 = unary[:, alpha].astype(np.float64).copy()
    np.add.at(cost1, edges[:, 0], c - a)
    np.add.at(cost1, edges[:, 1], -c)
    cap = b + c - a
    if (cap < -1e-12 * max(1.0, float(np.abs(weights).max(initial=0.0)))).any():
        raise NonSubmodular("expansion move produced a negative pairwise capacity")
    x, _ = min_cut(cost0, cost1, edges, np.maximum(cap, 0.0))
    return np.where(x == 1, alpha, labels)


def alpha_expansion(unary, edges, weights, init=None, max_sweeps=50, history=None):
    """Approximate Potts minimizer by alpha-expansion sweeps.

    With two labels the problem is solved exactly by a single cut.  A move is
    accepted only if it lowers the energy; sweeps stop once a full pass over
    the labels changes nothing.  Energies after each sweep are appended to
    ``history`` when given.
    """
    unary = np.asarray(unary, dtype=np.float64)
    n, k = unary.shape
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights < 0).any():
        raise NonSubmodular("Potts weights must be non-negative")
    if k == 1:
        labels = np.zeros(n, dtype=np.int64)
        if history is not None:
            history.append(potts_energy(labels, unary, edges, weights))
        return labels
    if k == 2 and init is None:
        labels = _binary_potts(unary, edges, weights)
        if history is not None:
            history.append(potts_energy(labels, unary, edges, weights))
        return labels

    labels = np.argmin(unary, axis=1) if init is None else np.asarray(init, dtype=np.int64).copy()
    energy = potts_energy(labels, unary, edges, weights)
    if history is not None:
        history.append(energy)
    tol = 1e-12 * max(1.0, abs(energy))
    for _ in range(max_sweeps):
        changed = False
        for alpha in range(k):
            proposal = _expansion_move(labels, alpha, unary, edges, weights)
            e_new = potts_energy(proposal, unary, edges, weights)
            if e_new < energy - tol:
                labels, energy, changed = proposal, e_new, True
        if history is not None:
            history.append(energy)
        if not changed:
            break
    return labels


def grid_edges(mask, spacing=(1.0, 1.0, 1.0)):
    """6-connected edges between voxels of ``mask`` (indices into ``flatnonzero(mask)``).

    Returns ``(edges, face_area)`` where ``edges`` has shape ``(e, 2)``.
    """
    mask = np.asarray(mask, dtype=bool)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    sx, sy, sz = (tuple(spacing) + (1.0, 1.0, 1.0))[:3]
    areas = (sy * sz, sx * sz, sx * sy)
    out_e, out_a = [], []
    for axis in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a, b = index[tuple(lo)], index[tuple(hi)]
        keep = (a >= 0) & (b >= 0)
        pairs = np.stack([a[keep], b[keep]], axis=1)
        out_e.append(pairs)
        out_a.append(np.full(pairs.shape[0], areas[axis]))
    if not out_e:
        return np.zeros((0, 2), np.int64), np.zeros(0)
    return np.concatenate(out_e), np.concatenate(out_a)
