"""Cascadic Mumford-Shah cartoon segmentation.

The piecewise-constant cartoon energy of a partition into regions ``R_i`` is::

    E = sum_i sum_{x in R_i} |f(x) - mean_i|^2 * voxel_volume + nu * boundary_area

where the boundary is the total area of 6-connected faces between voxels of
different regions.  It is minimized by region merging:

1. A merge trace is built once per image: starting from singleton voxels,
   the adjacent pair with the smallest data-term increase per unit of shared
   boundary is merged, repeatedly, until one region per connected component
   remains.  The trace records every merge's data and boundary change.
2. For a given ``nu`` the state along the trace with the lowest energy is
   selected.  At that state no single pairwise merge lowers the energy (the
   next merge in the trace would be the cheapest one), and the number of
   regions never increases with ``nu``.
3. Optionally, small partitions are polished with split, merge and Potts
   reassignment moves that are accepted only when they lower the energy.

Thresholds are found with Otsu's method on 256-bin histograms.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import DegenerateHistogram, EmptyBrain, InvalidConfig, ScheduleExhausted
from .graphcut import alpha_expansion, grid_edges
from .volume import T1C, MultiModalVolume

N_BINS = 256


# -- Otsu -----------------------------------------------------------------------

@dataclass(frozen=True)
class Histogram:
    """Non-negative integer counts over equal-width bins spanning ``[lo, hi]``."""

    counts: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.shape[0] < 1:
            raise ValueError("histogram needs a 1D array of counts")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise ValueError("histogram counts must be integers")
            counts = counts.astype(np.int64)
        if (counts < 0).any():
            raise ValueError("histogram counts must be non-negative")
        if not self.hi > self.lo:
            raise ValueError("histogram range needs hi > lo")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def n_bins(self) -> int:
        return int(self.counts.shape[0])

    def edge(self, k: int) -> float:
        return self.lo + (self.hi - self.lo) * k / self.n_bins

    def bin_index(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        idx = np.floor((values - self.lo) / (self.hi - self.lo) * self.n_bins).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)


def histogram(values, weights=None, n_bins: int = N_BINS, lo=None, hi=None) -> Histogram:
    """Histogram of ``values`` (optionally with integer ``weights``) over their range."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DegenerateHistogram("no values to histogram")
    lo = float(values.min()) if lo is None else float(lo)
    hi = float(values.max()) if hi is None else float(hi)
    if not hi > lo:
        raise DegenerateHistogram("all values are identical")
    w = np.ones(values.shape, np.int64) if weights is None else np.asarray(weights).ravel()
    probe = Histogram(np.zeros(n_bins, np.int64), lo, hi)
    counts = np.bincount(probe.bin_index(values), weights=w, minlength=n_bins)
    return Histogram(np.round(counts).astype(np.int64), lo, hi)


def otsu_index(hist: Histogram) -> int:
    """Smallest bin index ``k`` (class one = bins ``>= k``) maximizing between-class variance.

    Bin indices stand in for bin centres (between-class variance is invariant
    under affine relabelling of values), and all arithmetic is on exact
    integers so ties are decided exactly.
    """
    counts = [int(c) for c in hist.counts]
    if sum(1 for c in counts if c > 0) < 2:
        raise DegenerateHistogram("Otsu needs at least two nonempty bins")
    n_tot = sum(counts)
    s_tot = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = -1, -1, 1
    n0 = s0 = 0
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1, s1 = n_tot - n0, s_tot - s0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * n_tot^2 = (n0 s1 - n1 s0)^2 / (n0 n1)
        num, den = (n0 * s1 - n1 * s0) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_threshold(hist: Histogram) -> float:
    """Bin edge separating the two Otsu classes (values ``>=`` it are the upper class)."""
    return hist.edge(otsu_index(hist))


def otsu_split(values, weights=None) -> np.ndarray:
    """Boolean mask of ``values`` falling in the upper Otsu class."""
    hist = histogram(values, weights)
    return hist.bin_index(values) >= otsu_index(hist)


# -- partitions -------------------------------------------------------------------

def _as_channels(data, mask=None, spacing=None):
    """Normalize inputs to ``(values (n, m), mask, spacing)``.

    ``data`` is a :class:`MultiModalVolume` (all four channels) or an array
    holding one scalar channel of any dimensionality.
    """
    if isinstance(data, MultiModalVolume):
        arr = data.data.astype(np.float64)
        spacing = data.spacing if spacing is None else spacing
    else:
        arr = np.asarray(data, dtype=np.float64)[None]
    spatial = arr.shape[1:]
    mask = np.ones(spatial, bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != spatial:
        raise ValueError(f"mask shape {mask.shape} does not match data {spatial}")
    spacing = tuple(float(s) for s in (spacing if spacing is not None else (1.0,) * len(spatial)))
    values = arr[:, mask].T.copy()
    return values, mask, spacing


def _voxel_volume(spacing, ndim) -> float:
    return float(np.prod((tuple(spacing) + (1.0, 1.0, 1.0))[:max(ndim, 3)]))


def _compact(labels) -> np.ndarray:
    """Relabel to ``0..k-1`` in order of first occurrence."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.shape[0], np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.shape[0])
    return rank[inv.ravel()]


def _stats(labels, values, k):
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.stack([np.bincount(labels, values[:, c], minlength=k)
                     for c in range(values.shape[1])], axis=1)
    sq = np.stack([np.bincount(labels, values[:, c] ** 2, minlength=k)
                   for c in range(values.shape[1])], axis=1)
    return counts, sums, sq


def _adjacency(labels, edges, areas):
    a, b = labels[edges[:, 0]], labels[edges[:, 1]]
    cut = a != b
    lo, hi = np.minimum(a[cut], b[cut]), np.maximum(a[cut], b[cut])
    if lo.size == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0)
    k = int(labels.max()) + 1
    key = lo * k + hi
    uniq, inv = np.unique(key, return_inverse=True)
    total = np.bincount(inv, weights=areas[cut])
    return np.stack([uniq // k, uniq % k], axis=1), total


def _data_term(counts, sums, sq) -> float:
    safe = np.maximum(counts, 1.0)[:, None]
    return float(np.maximum(sq - sums ** 2 / safe, 0.0).sum())


@dataclass
class RegionPartition:
    """Piecewise-constant partition with per-region sufficient statistics.

    ``labels`` holds a region id per voxel (``-1`` outside the domain);
    ``adjacency`` maps ``(a, b)`` with ``a < b`` to shared boundary area (mm^2).
    """

    labels: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    sq_sums: np.ndarray
    adjacency: Dict[Tuple[int, int], float]
    spacing: Tuple[float, ...]

    @classmethod
    def from_labels(cls, labels, data, mask=None, spacing=None) -> "RegionPartition":
        values, mask, spacing = _as_channels(data, mask, spacing)
        labels = np.asarray(labels)
        if labels.shape != mask.shape:
            raise ValueError("labels and data disagree in shape")
        comp = _compact(labels[mask])
        edges, areas = grid_edges(mask, spacing)
        return cls._build(comp, values, mask, spacing, edges, areas)

    @classmethod
    def _build(cls, comp, values, mask, spacing, edges, areas) -> "RegionPartition":
        k = int(comp.max()) + 1 if comp.size else 0
        counts, sums, sq = _stats(comp, values, k)
        pairs, total = _adjacency(comp, edges, areas)
        full = -np.ones(mask.shape, np.int64)
        full[mask] = comp
        adj = {(int(a), int(b)): float(t) for (a, b), t in zip(pairs, total)}
        return cls(full, counts.astype(np.int64), sums, sq, adj, tuple(spacing))

    @property
    def n_regions(self) -> int:
        return int(self.counts.shape[0])

    @property
    def means(self) -> np.ndarray:
        return self.sums / np.maximum(self.counts, 1)[:, None]

    @property
    def voxel_volume(self) -> float:
        return _voxel_volume(self.spacing, self.labels.ndim)

    @property
    def boundary_area(self) -> float:
        return float(sum(self.adjacency.values()))

    def data_term(self) -> float:
        return _data_term(self.counts.astype(np.float64), self.sums, self.sq_sums) * self.voxel_volume

    def cartoon(self, channel: int = 0) -> np.ndarray:
        """Piecewise-constant image of region means (0 outside the domain)."""
        out = np.zeros(self.labels.shape)
        inside = self.labels >= 0
        out[inside] = self.means[self.labels[inside], channel]
        return out

    def merge_delta(self, a: int, b: int, nu: float) -> float:
        """Energy change of merging regions ``a`` and ``b`` (O(1) from statistics)."""
        na, nb = float(self.counts[a]), float(self.counts[b])
        diff = self.sums[a] / na - self.sums[b] / nb
        d_data = na * nb / (na + nb) * float(diff @ diff) * self.voxel_volume
        area = self.adjacency.get((min(a, b), max(a, b)), 0.0)
        return d_data - nu * area


def ms_energy(partition: RegionPartition, data=None, nu: float = 0.0) -> float:
    """Cartoon energy of ``partition``; statistics are recomputed from ``data`` if given."""
    if data is not None:
        values, _, _ = _as_channels(data, partition.labels >= 0, partition.spacing)
        comp = partition.labels[partition.labels >= 0]
        counts, sums, sq = _stats(comp, values, partition.n_regions)
        data_term = _data_term(counts, sums, sq) * partition.voxel_volume
    else:
        data_term = partition.data_term()
    return data_term + nu * partition.boundary_area


# -- merge trace ------------------------------------------------------------------

@njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(cache=True)
def _pair_cost(counts, sums, a, b):
    na, nb = counts[a], counts[b]
    d = 0.0
    for c in range(sums.shape[1]):
        t = sums[a, c] / na - sums[b, c] / nb
        d += t * t
    return na * nb / (na + nb) * d


@njit(cache=True)
def _merge_trace(n, eu, ev, earea, counts, sums):
    """Ratio-ordered region merging; returns the merge sequence.

    Regions are identified by their smallest member index.  Each region keeps
    a linked list of incident edges; after a merge the surviving region's list
    is compacted, duplicate edges to the same neighbour are fused, and the
    merge keys of all its edges are refreshed (stale heap entries are skipped
    by version stamps).
    """
    n_e = eu.shape[0]
    parent = np.arange(n)
    counts = counts.copy()
    sums = sums.copy()
    area = earea.copy()
    alive = np.ones(n_e, np.bool_)
    version = np.zeros(n_e, np.int64)
    nxt = np.full(2 * n_e, -1, np.int64)
    node_edge = np.empty(2 * n_e, np.int64)
    head = np.full(n, -1, np.int64)
    tail = np.full(n, -1, np.int64)
    for e in range(n_e):
        for j in range(2):
            v = eu[e] if j == 0 else ev[e]
            node = 2 * e + j
            node_edge[node] = e
            if head[v] == -1:
                head[v] = node
            else:
                nxt[tail[v]] = node
            tail[v] = node
    heap = [(0.0, 0, 0, 0, 0)]
    heap.pop()
    for e in range(n_e):
        a, b = eu[e], ev[e]
        heap.append((_pair_cost(counts, sums, a, b) / area[e], min(a, b), max(a, b), e, 0))
    heapq.heapify(heap)

    mark = np.full(n, -1, np.int64)
    out_a = np.empty(max(n - 1, 0), np.int64)
    out_b = np.empty(max(n - 1, 0), np.int64)
    out_d = np.empty(max(n - 1, 0), np.float64)
    out_area = np.empty(max(n - 1, 0), np.float64)
    k = 0
    while len(heap) > 0:
        item = heapq.heappop(heap)
        e = item[3]
        if not alive[e] or item[4] != version[e]:
            continue
        a = _find(parent, eu[e])
        b = _find(parent, ev[e])
        r, s = min(a, b), max(a, b)
        out_a[k] = r
        out_b[k] = s
        out_d[k] = _pair_cost(counts, sums, r, s)
        out_area[k] = area[e]
        k += 1
        alive[e] = False
        parent[s] = r
        counts[r] += counts[s]
        for c in range(sums.shape[1]):
            sums[r, c] += sums[s, c]
        if head[s] != -1:
            if head[r] == -1:
                head[r] = head[s]
            else:
                nxt[tail[r]] = head[s]
            tail[r] = tail[s]
        head[s] = -1
        tail[s] = -1

        prev = -1
        node = head[r]
        while node != -1:
            ed = node_edge[node]
            following = nxt[node]
            keep = False
            if alive[ed]:
                x = _find(parent, eu[ed])
                y = _find(parent, ev[ed])
                if x == y:
                    alive[ed] = False
                else:
                    c = y if x == r else x
                    if mark[c] >= 0 and mark[c] != ed:
                        area[mark[c]] += area[ed]
                        alive[ed] = False
                    else:
                        mark[c] = ed
                        keep = True
            if keep:
                prev = node
            else:
                if prev == -1:
                    head[r] = following
                else:
                    nxt[prev] = following
                if following == -1:
                    tail[r] = prev
            node = following
        node = head[r]
        while node != -1:
            ed = node_edge[node]
            x = _find(parent, eu[ed])
            y = _find(parent, ev[ed])
            c = y if x == r else x
            mark[c] = -1
            version[ed] += 1
            heapq.heappush(heap, (_pair_cost(counts, sums, r, c) / area[ed],
                                  min(r, c), max(r, c), ed, version[ed]))
            node = nxt[node]
    return out_a[:k], out_b[:k], out_d[:k], out_area[:k]


@njit(cache=True)
def _replay(n, ma, mb, k):
    parent = np.arange(n)
    for i in range(k):
        parent[mb[i]] = ma[i]
    out = np.empty(n, np.int64)
    for v in range(n):
        out[v] = _find(parent, v)
    return out


@dataclass
class MergeTrace:
    """Merge sequence over the voxels of ``mask``, reusable for any ``nu``."""

    mask: np.ndarray
    spacing: Tuple[float, ...]
    values: np.ndarray
    edges: np.ndarray
    areas: np.ndarray
    init: np.ndarray
    merge_a: np.ndarray
    merge_b: np.ndarray
    data_after: np.ndarray
    boundary_after: np.ndarray

    @classmethod
    def build(cls, data, mask=None, spacing=None, init_block: int = 1) -> "MergeTrace":
        values, mask, spacing = _as_channels(data, mask, spacing)
        if not mask.any():
            raise EmptyBrain("cannot segment an empty domain")
        edges, areas = grid_edges(mask, spacing)
        if init_block > 1:
            init = _block_labels(mask, init_block)
        else:
            init = np.arange(values.shape[0], dtype=np.int64)
        k0 = int(init.max()) + 1
        counts, sums, sq = _stats(init, values, k0)
        pairs, total = _adjacency(init, edges, areas)
        vol = _voxel_volume(spacing, mask.ndim)
        ma, mb, dd, da = _merge_trace(k0, pairs[:, 0].copy(), pairs[:, 1].copy(),
                                      total, counts, sums)
        d0 = _data_term(counts, sums, sq) * vol
        data_after = d0 + np.concatenate([[0.0], np.cumsum(dd * vol)])
        boundary_after = float(total.sum()) - np.concatenate([[0.0], np.cumsum(da)])
        return cls(mask, spacing, values, edges, areas, init, ma, mb, data_after,
                   np.maximum(boundary_after, 0.0))

    @property
    def n_states(self) -> int:
        return self.data_after.shape[0]

    def best_state(self, nu: float) -> int:
        """Number of merges minimizing the energy along the trace (first minimizer)."""
        energy = self.data_after + nu * self.boundary_after
        return int(np.argmin(energy))

    def labels_at(self, k: int) -> np.ndarray:
        """Compact region labels over the domain voxels after ``k`` merges."""
        k0 = int(self.init.max()) + 1
        roots = _replay(k0, self.merge_a, self.merge_b, k)
        return _compact(roots[self.init])

    def partition(self, comp) -> RegionPartition:
        return RegionPartition._build(comp, self.values, self.mask, self.spacing,
                                      self.edges, self.areas)


def _block_labels(mask, block):
    coords = np.nonzero(mask)
    dims = [(s + block - 1) // block for s in mask.shape]
    flat = np.ravel_multi_index(tuple(c // block for c in coords), dims)
    # split blocks whose masked part is disconnected
    comp = _compact(flat)
    edges, _ = grid_edges(mask)
    same = comp[edges[:, 0]] == comp[edges[:, 1]]
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    n = comp.shape[0]
    g = coo_matrix((np.ones(int(same.sum())), (edges[same, 0], edges[same, 1])), shape=(n, n))
    _, cc = connected_components(g, directed=False)
    return _compact(cc)


# -- local refinement -----------------------------------------------------------

def _energy(comp, values, edges, areas, vol, nu):
    k = int(comp.max()) + 1
    counts, sums, sq = _stats(comp, values, k)
    cut = comp[edges[:, 0]] != comp[edges[:, 1]]
    return _data_term(counts, sums, sq) * vol + nu * float(areas[cut].sum())


def _components(labels, edges, n):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    same = labels[edges[:, 0]] == labels[edges[:, 1]]
    g = coo_matrix((np.ones(int(same.sum())), (edges[same, 0], edges[same, 1])), shape=(n, n))
    _, cc = connected_components(g, directed=False)
    return _compact(cc)


def _greedy_merges(comp, values, edges, areas, vol, nu, triples=True):
    """Apply the most energy-reducing pair (or triple) merge until none helps."""
    energy = _energy(comp, values, edges, areas, vol, nu)
    while True:
        k = int(comp.max()) + 1
        if k < 2:
            return comp, energy
        counts, sums, _ = _stats(comp, values, k)
        pairs, total = _adjacency(comp, edges, areas)
        means = sums / counts[:, None]
        diff = means[pairs[:, 0]] - means[pairs[:, 1]]
        na, nb = counts[pairs[:, 0]], counts[pairs[:, 1]]
        delta = na * nb / (na + nb) * (diff ** 2).sum(axis=1) * vol - nu * total
        best = int(np.argmin(delta))
        if delta[best] < -1e-12 * max(1.0, energy):
            comp = comp.copy()
            comp[comp == pairs[best, 1]] = pairs[best, 0]
            comp = _compact(comp)
            energy = _energy(comp, values, edges, areas, vol, nu)
            continue
        if not triples:
            return comp, energy
        found = None
        nbrs: Dict[int, List[int]] = {}
        for a, b in pairs:
            nbrs.setdefault(int(a), []).append(int(b))
            nbrs.setdefault(int(b), []).append(int(a))
        for a in sorted(nbrs):
            ns = nbrs[a]
            for i in range(len(ns)):
                for j in range(i + 1, len(ns)):
                    trial = comp.copy()
                    trial[(comp == ns[i]) | (comp == ns[j])] = a
                    trial = _compact(trial)
                    e = _energy(trial, values, edges, areas, vol, nu)
                    if e < energy - 1e-12 * max(1.0, energy) and (found is None or e < found[0]):
                        found = (e, trial)
        if found is None:
            return comp, energy
        energy, comp = found


def _potts_reassign(comp, values, edges, areas, vol, nu):
    """Reassign voxels to the current region means by a Potts graph cut."""
    k = int(comp.max()) + 1
    counts, sums, _ = _stats(comp, values, k)
    means = sums / counts[:, None]
    unary = ((values[:, None, :] - means[None]) ** 2).sum(axis=2) * vol
    lab = alpha_expansion(unary, edges, nu * areas, init=comp if k > 2 else None)
    return _components(lab, edges, comp.shape[0])


def _split_region(comp, r, values, edges, areas, vol, nu, iters=10):
    """Best two-way Potts split of region ``r`` by alternating cuts and means."""
    idx = np.flatnonzero(comp == r)
    if idx.size < 2:
        return None
    local = -np.ones(comp.shape[0], np.int64)
    local[idx] = np.arange(idx.size)
    inner = (local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0)
    sub_e = local[edges[inner]]
    sub_a = areas[inner]
    v = values[idx]
    proj = v @ np.ones(v.shape[1])
    thr = proj.mean()
    part = (proj > thr).astype(np.int64)
    if part.min() == part.max():
        return None
    for _ in range(iters):
        c0, c1 = v[part == 0].mean(axis=0), v[part == 1].mean(axis=0)
        unary = np.stack([((v - c0) ** 2).sum(axis=1), ((v - c1) ** 2).sum(axis=1)], axis=1) * vol
        new = alpha_expansion(unary, sub_e, nu * sub_a)
        if new.min() == new.max():
            return None
        if np.array_equal(new, part):
            break
        part = new
    out = comp.copy()
    out[idx[part == 1]] = comp.max() + 1
    return _components(out, edges, comp.shape[0])


def refine_partition(comp, values, edges, areas, vol, nu, max_rounds: int = 20):
    """Polish a partition with energy-decreasing merge, split and Potts moves."""
    comp, energy = _greedy_merges(comp, values, edges, areas, vol, nu)
    for _ in range(max_rounds):
        start = energy
        improved = True
        while improved:
            improved = False
            for r in range(int(comp.max()) + 1):
                trial = _split_region(comp, r, values, edges, areas, vol, nu)
                if trial is None:
                    continue
                trial, e = _greedy_merges(trial, values, edges, areas, vol, nu)
                if e < energy - 1e-12 * max(1.0, energy):
                    comp, energy, improved = trial, e, True
                    break
        if int(comp.max()) + 1 > 1:
            trial = _potts_reassign(comp, values, edges, areas, vol, nu)
            trial, e = _greedy_merges(trial, values, edges, areas, vol, nu)
            if e < energy - 1e-12 * max(1.0, energy):
                comp, energy = trial, e
        if energy >= start - 1e-12 * max(1.0, start):
            break
    return comp, energy


def minimize_cartoon(data, mask=None, nu: float = 1.0, spacing=None, refine: bool = True,
                     refine_max_regions: int = 64, init_block: int = 1,
                     trace: Optional[MergeTrace] = None) -> RegionPartition:
    """Piecewise-constant partition approximately minimizing the cartoon energy.

    ``data`` is a :class:`MultiModalVolume` or a single-channel array of any
    dimensionality; ``mask`` restricts the domain.  Partitions with at most
    ``refine_max_regions`` regions are polished by :func:`refine_partition`.
    A prebuilt ``trace`` skips the merge pass.
    """
    if not nu > 0:
        raise InvalidConfig("nu must be positive")
    if trace is None:
        trace = MergeTrace.build(data, mask, spacing, init_block=init_block)
    comp = trace.labels_at(trace.best_state(nu))
    if refine and int(comp.max()) + 1 <= refine_max_regions:
        vol = _voxel_volume(trace.spacing, trace.mask.ndim)
        comp, _ = refine_partition(comp, trace.values, trace.edges, trace.areas, vol, nu)
    return trace.partition(comp)


# -- cascade --------------------------------------------------------------------

@dataclass(frozen=True)
class CascadeConfig:
    nu_start: float = 400000.0
    nu_decay: float = 0.15
    volume_fraction_max: float = 0.5
    nu_subsplit: float = 1.0
    nu_min: float = 1.0
    # normalized [0, 1] intensities are multiplied by this before the energy
    intensity_scale: float = 1000.0
    refine: bool = True
    swap_necrosis_edema: bool = False

    def __post_init__(self):
        if not 0 < self.nu_decay < 1:
            raise InvalidConfig("nu_decay must lie in (0, 1)")
        if not 0 < self.volume_fraction_max < 1:
            raise InvalidConfig("volume_fraction_max must lie in (0, 1)")
        if not (self.nu_start > 0 and self.nu_min > 0 and self.nu_subsplit > 0
                and self.intensity_scale > 0):
            raise InvalidConfig("nu_start, nu_min, nu_subsplit and intensity_scale must be positive")


@dataclass
class CascadeResult:
    mask: np.ndarray
    nu: float
    visited: List[float] = field(default_factory=list)
    partition: Optional[RegionPartition] = None


def bright_segment(partition: RegionPartition, channel: int = 0) -> np.ndarray:
    """Voxels of regions whose mean lies in the upper Otsu class of size-weighted means."""
    means = partition.means[:, channel]
    upper = otsu_split(means, partition.counts)
    return (partition.labels >= 0) & upper[np.maximum(partition.labels, 0)]


def cascade_whole_tumor_detailed(flair, mask, config: CascadeConfig = CascadeConfig(),
                                 spacing=(1.0, 1.0, 1.0)) -> CascadeResult:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyBrain("empty brain mask")
    scaled = np.asarray(flair, dtype=np.float64) * config.intensity_scale
    trace = MergeTrace.build(scaled, mask, spacing)
    brain = int(mask.sum())
    visited: List[float] = []
    nu = float(config.nu_start)
    while nu >= config.nu_min:
        visited.append(nu)
        part = minimize_cartoon(scaled, mask, nu, spacing, refine=config.refine, trace=trace)
        try:
            cand = bright_segment(part)
        except DegenerateHistogram:
            cand = None
        if cand is not None and cand.sum() <= config.volume_fraction_max * brain:
            return CascadeResult(cand, nu, visited, part)
        nu *= 1.0 - config.nu_decay
    exc = ScheduleExhausted(f"no bright segment below {config.volume_fraction_max:.0%} "
                            f"of the brain for nu >= {config.nu_min}")
    exc.visited = visited
    raise exc


def cascade_whole_tumor(flair, mask, config: CascadeConfig = CascadeConfig(),
                        spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Whole-tumor mask from FLAIR by the decreasing-``nu`` continuation."""
    return cascade_whole_tumor_detailed(flair, mask, config, spacing).mask


def _otsu_or_lower(values, subset):
    """Upper-class mask within ``subset``; a degenerate histogram puts all in the lower class."""
    out = np.zeros(values.shape, bool)
    if not subset.any():
        return out
    try:
        out[subset] = otsu_split(values[subset])
    except DegenerateHistogram:
        pass
    return out


def split_subcomponents(volume: MultiModalVolume, whole, config: CascadeConfig = CascadeConfig()):
    """Label map of enhancing (4), necrosis/non-enhancing core (1) and edema (2) inside ``whole``."""
    whole = np.asarray(whole, dtype=bool)
    if not whole.any():
        raise EmptyBrain("whole-tumor mask is empty")
    t1c = volume.channel(T1C).astype(np.float64) * config.intensity_scale
    part = minimize_cartoon(t1c, whole, config.nu_subsplit, volume.spacing, refine=config.refine)
    cartoon = part.cartoon()
    active = _otsu_or_lower(cartoon, whole)
    enhancing = _otsu_or_lower(cartoon, active)
    rest = whole & ~active
    upper_rest = _otsu_or_lower(cartoon, rest)
    labels = np.zeros(whole.shape, np.uint8)
    labels[active] = 1
    labels[enhancing] = 4
    low, high = (2, 1) if config.swap_necrosis_edema else (1, 2)
    labels[rest] = low
    labels[rest & upper_rest] = high
    return labels


def segment(volume: MultiModalVolume, mask=None, config: CascadeConfig = CascadeConfig()):
    """Full cascade: whole tumor from FLAIR, then sub-components from T1c."""
    from .volume import FLAIR, brain_mask
    mask = brain_mask(volume) if mask is None else np.asarray(mask, dtype=bool)
    whole = cascade_whole_tumor(volume.channel(FLAIR), mask, config, volume.spacing)
    return split_subcomponents(volume, whole, config)
