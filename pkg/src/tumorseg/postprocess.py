"""Scribble-based refinement of a predicted label map.

A prediction is thinned to a lattice of scribbles.  Every label gets a
potential from a spatially adaptive kernel density of its scribbles, and the
labels are re-solved as a minimal partition.  The partition perimeter is
measured in an image metric ``g`` that makes boundaries cheap along image
edges::

    E(l) = sum_x h_{l(x)}(x) * voxel_volume
           + lambda * sum_faces [l(x) != l(y)] * face_area * (g(x) + g(y)) / 2
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import EmptyScribbles, InvalidConfig, NonSubmodular, TooFewLabels
from .graphcut import alpha_expansion, grid_edges, potts_energy
from .volume import LEGAL_LABELS, MultiModalVolume, brain_mask, check_labelmap


@dataclass(frozen=True)
class PartitionParams:
    beta: float = 1.0
    zeta: float = 0.05
    sigma_int: float = 0.1
    alpha_rho: float = 0.5
    lambda_perim: float = 1.0
    stride: int = 2
    eps_log: float = 1e-6
    min_enhancing: int = 50

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidConfig("beta must be positive")
        if not 0 < self.zeta < 0.5:
            raise InvalidConfig("zeta must lie in (0, 0.5)")
        if not (self.sigma_int > 0 and self.alpha_rho > 0 and self.eps_log > 0):
            raise InvalidConfig("sigma_int, alpha_rho and eps_log must be positive")
        if self.lambda_perim < 0:
            raise InvalidConfig("lambda_perim must be non-negative")
        if int(self.stride) < 1:
            raise InvalidConfig("stride must be >= 1")
        if self.min_enhancing < 0:
            raise InvalidConfig("min_enhancing must be >= 0")


# -- edges and metric ---------------------------------------------------------------

@dataclass(frozen=True)
class EdgeField:
    psi: np.ndarray
    psi_bar: float


def gradient_edges(volume: MultiModalVolume) -> np.ndarray:
    """Norm over modalities of central-difference gradient magnitudes."""
    total = np.zeros(volume.dims)
    for c in range(volume.data.shape[0]):
        for g in np.gradient(volume.data[c].astype(np.float64), *volume.spacing):
            total += g * g
    return np.sqrt(total)


def edge_map(volume: MultiModalVolume, detector: Callable = gradient_edges) -> EdgeField:
    """Edge strength in [0, 1] and its mean statistic ``2/|Omega| * sum |psi| dV``."""
    psi = np.asarray(detector(volume), dtype=np.float64)
    peak = psi.max()
    if peak > 0:
        psi = psi / peak
    psi_bar = 2.0 * float(np.abs(psi).mean())
    return EdgeField(psi, psi_bar)


def boundary_metric(edge: EdgeField, beta: float = 1.0) -> np.ndarray:
    """``g = exp(-psi^beta / psi_bar)``; identically 1 when ``psi_bar`` vanishes."""
    if not beta > 0:
        raise InvalidConfig("beta must be positive")
    if edge.psi_bar < 1e-12:
        return np.ones(edge.psi.shape)
    return np.exp(-np.power(edge.psi, beta) / edge.psi_bar)


# -- scribbles ---------------------------------------------------------------------

ScribbleSet = Dict[int, np.ndarray]


def sparsify_mask(pred, stride: int = 2, mask=None) -> ScribbleSet:
    """Voxels on the ``stride`` lattice grouped by predicted label.

    Returns ``{label: (k, 3) integer coordinates}`` for every legal label
    (possibly empty).  ``mask`` restricts the kept voxels.
    """
    pred = check_labelmap(pred)
    if stride < 1:
        raise InvalidConfig("stride must be >= 1")
    keep = np.zeros(pred.shape, bool)
    keep[::stride, ::stride, ::stride] = True
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    if not keep.any():
        raise EmptyScribbles("no voxel survives sparsification")
    return {lab: np.argwhere(keep & (pred == lab)) for lab in LEGAL_LABELS}


def scribble_map(scribbles: ScribbleSet, shape) -> np.ndarray:
    """Per-voxel scribble label (``-1`` where there is none)."""
    out = -np.ones(shape, np.int64)
    for lab, coords in scribbles.items():
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        hit = out[tuple(coords.T)]
        if (hit >= 0).any():
            raise ValueError("scribble sets overlap")
        out[tuple(coords.T)] = lab
    return out


# -- potentials ---------------------------------------------------------------------

@dataclass
class PotentialField:
    labels: Tuple[int, ...]
    h: np.ndarray             # (n_labels, nx, ny, nz); zero outside the domain
    h_tilde: np.ndarray       # same shape, values in [0, 1]


@njit(cache=True)
def _kernel_density(px, pf, rho, sx, sf, cell_start, cell_items, cdims, csize, inv2s2):
    """Mean over scribbles ``y`` within ``3 rho(x)`` of spatial-times-intensity Gaussians."""
    n = px.shape[0]
    k = sx.shape[0]
    m = pf.shape[1]
    out = np.zeros(n)
    for p in range(n):
        r = rho[p]
        reach = 3.0 * r
        reach2 = reach * reach
        inv2r2 = 1.0 / (2.0 * r * r)
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        n_cells = 1
        for a in range(3):
            lo[a] = max(0, int(math.floor((px[p, a] - reach) / csize[a])))
            hi[a] = min(cdims[a] - 1, int(math.floor((px[p, a] + reach) / csize[a])))
            if hi[a] < lo[a]:
                n_cells = 0
            n_cells *= max(hi[a] - lo[a] + 1, 0)
        acc = 0.0
        if n_cells >= k:
            for q in range(k):
                d2 = 0.0
                for a in range(3):
                    t = px[p, a] - sx[q, a]
                    d2 += t * t
                if d2 > reach2:
                    continue
                f2 = 0.0
                for c in range(m):
                    t = pf[p, c] - sf[q, c]
                    f2 += t * t
                acc += math.exp(-d2 * inv2r2 - f2 * inv2s2)
        else:
            for i in range(lo[0], hi[0] + 1):
                for j in range(lo[1], hi[1] + 1):
                    for l in range(lo[2], hi[2] + 1):
                        cell = (i * cdims[1] + j) * cdims[2] + l
                        for t_ in range(cell_start[cell], cell_start[cell + 1]):
                            q = cell_items[t_]
                            d2 = 0.0
                            for a in range(3):
                                t = px[p, a] - sx[q, a]
                                d2 += t * t
                            if d2 > reach2:
                                continue
                            f2 = 0.0
                            for c in range(m):
                                t = pf[p, c] - sf[q, c]
                                f2 += t * t
                            acc += math.exp(-d2 * inv2r2 - f2 * inv2s2)
        out[p] = acc / k
    return out


def _buckets(points_mm, shape, spacing, cell_vox=4):
    csize = np.asarray(spacing, dtype=np.float64) * cell_vox
    cdims = np.asarray([(s + cell_vox - 1) // cell_vox for s in shape], dtype=np.int64)
    cidx = np.minimum((points_mm / csize).astype(np.int64), cdims - 1)
    flat = (cidx[:, 0] * cdims[1] + cidx[:, 1]) * cdims[2] + cidx[:, 2]
    order = np.argsort(flat, kind="stable")
    start = np.zeros(int(np.prod(cdims)) + 1, np.int64)
    np.add.at(start, flat + 1, 1)
    return np.cumsum(start), order.astype(np.int64), cdims, csize


def potentials(scribbles: ScribbleSet, volume: MultiModalVolume,
               params: PartitionParams = PartitionParams(), mask=None) -> PotentialField:
    """Negative-log potentials for every label with a nonempty scribble set."""
    shape = volume.dims
    mask = np.ones(shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    active = tuple(lab for lab in sorted(scribbles) if len(scribbles[lab]) > 0)
    if len(active) < 2:
        raise TooFewLabels(f"need scribbles of at least two labels, got {list(active)}")
    n = len(active)
    smap = scribble_map(scribbles, shape)
    spacing = np.asarray(volume.spacing)
    feats = np.moveaxis(volume.data.astype(np.float64), 0, -1)
    free = mask & (smap < 0)
    free_idx = np.argwhere(free)
    px = free_idx * spacing
    pf = feats[free]
    inv2s2 = 1.0 / (2.0 * params.sigma_int ** 2)

    h_tilde = np.zeros((n,) + tuple(shape))
    for i, lab in enumerate(active):
        coords = np.asarray(scribbles[lab], dtype=np.int64).reshape(-1, 3)
        own = np.zeros(shape, bool)
        own[tuple(coords.T)] = True
        dist = ndimage.distance_transform_edt(~own, sampling=volume.spacing)
        rho = params.alpha_rho * dist[free]
        sx = coords * spacing
        sf = feats[tuple(coords.T)]
        start, items, cdims, csize = _buckets(sx, shape, volume.spacing)
        dens = _kernel_density(px, pf, rho, sx, sf, start, items, cdims, csize, inv2s2)
        if dens.size:
            lo, hi = dens.min(), dens.max()
            dens = (dens - lo) / (hi - lo) if hi > lo else np.ones_like(dens)
        layer = np.zeros(shape)
        layer[free] = dens
        on = mask & (smap >= 0)
        layer[on] = np.where(smap[on] == lab, 1.0 - params.zeta, params.zeta / (n - 1))
        h_tilde[i] = layer
    h = -np.log(np.maximum(h_tilde, params.eps_log))
    h[:, ~mask] = 0.0
    return PotentialField(active, h, h_tilde)


# -- partitioning ---------------------------------------------------------------------

def partition_problem(field: PotentialField, g, spacing, lambda_perim: float, mask):
    """Unary costs, edges and Potts weights of the partition energy over ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    vol = float(np.prod(spacing))
    unary = field.h[:, mask].T * vol
    edges, areas = grid_edges(mask, spacing)
    gm = np.asarray(g, dtype=np.float64)[mask]
    weights = lambda_perim * areas * 0.5 * (gm[edges[:, 0]] + gm[edges[:, 1]])
    return unary, edges, weights


def minimize_partition(field: PotentialField, g, spacing=(1.0, 1.0, 1.0),
                       lambda_perim: float = 1.0, mask=None, history=None) -> np.ndarray:
    """Label map minimizing potentials plus ``g``-weighted perimeter (0 outside ``mask``)."""
    shape = field.h.shape[1:]
    mask = np.ones(shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if len(field.labels) < 2:
        raise TooFewLabels("minimal partitioning needs at least two labels")
    unary, edges, weights = partition_problem(field, g, spacing, lambda_perim, mask)
    if (weights < 0).any():
        raise NonSubmodular("negative perimeter weight")
    idx = alpha_expansion(unary, edges, weights, history=history)
    out = np.zeros(shape, np.uint8)
    out[mask] = np.asarray(field.labels, dtype=np.uint8)[idx]
    return out


def densify(pred, volume: MultiModalVolume, params: PartitionParams = PartitionParams(),
            mask=None, strict: bool = False) -> np.ndarray:
    """Refine ``pred`` by scribble potentials and edge-weighted minimal partitioning.

    With fewer than two scribbled labels the input is returned unchanged (with
    a warning) unless ``strict`` is set.
    """
    pred = check_labelmap(pred)
    if pred.shape != volume.dims:
        raise ValueError("prediction and volume dims differ")
    mask = brain_mask(volume) if mask is None else np.asarray(mask, dtype=bool)
    g = boundary_metric(edge_map(volume), params.beta)
    try:
        scribbles = sparsify_mask(pred, params.stride, mask)
        field = potentials(scribbles, volume, params, mask)
    except (EmptyScribbles, TooFewLabels) as exc:
        if strict:
            raise
        warnings.warn(f"densify left the prediction unchanged: {exc}")
        return pred.copy()
    return minimize_partition(field, g, volume.spacing, params.lambda_perim, mask)


def enhancing_relabel(pred, min_voxels: int = 50) -> np.ndarray:
    """Turn all enhancing voxels into necrosis when there are fewer than ``min_voxels``."""
    if min_voxels < 0:
        raise InvalidConfig("min_voxels must be >= 0")
    pred = check_labelmap(pred).copy()
    enh = pred == 4
    if int(enh.sum()) < min_voxels:
        pred[enh] = 1
    return pred


def postprocess(pred, volume: MultiModalVolume, params: PartitionParams = PartitionParams(),
                mask=None) -> np.ndarray:
    """Densify, then apply the small-enhancing-core relabelling."""
    return enhancing_relabel(densify(pred, volume, params, mask), params.min_enhancing)
