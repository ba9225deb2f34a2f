import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import potts_brute
from tumorseg.errors import EmptyScribbles, InvalidConfig, TooFewLabels
from tumorseg.graphcut import potts_energy
from tumorseg.postprocess import (EdgeField, PartitionParams, PotentialField, boundary_metric,
                                  densify, edge_map, enhancing_relabel, minimize_partition,
                                  partition_problem, potentials, sparsify_mask)
from tumorseg.preprocess import normalize
from tumorseg.volume import COMPLETE, MultiModalVolume, region_dice


def test_edge_map_constant_and_step():
    const = MultiModalVolume(np.full((4, 6, 6, 6), 0.4, np.float32))
    e = edge_map(const)
    assert np.all(e.psi == 0) and e.psi_bar == 0
    assert np.all(boundary_metric(e) == 1)
    data = np.zeros((4, 8, 4, 4), np.float32)
    data[1, 4:] = 1.0
    e = edge_map(MultiModalVolume(data))
    assert e.psi.max() == 1.0
    assert np.all(e.psi[3:5] == 1.0)
    assert np.all(e.psi[:3] == 0) and np.all(e.psi[5:] == 0)
    assert e.psi_bar == pytest.approx(2 * e.psi.mean())


def test_boundary_metric_values():
    psi = np.array([0.0, 0.25, 1.0])
    g = boundary_metric(EdgeField(psi, 0.25), 1.0)
    assert g[0] == 1.0
    assert g[1] == pytest.approx(math.exp(-1))
    with pytest.raises(InvalidConfig):
        boundary_metric(EdgeField(psi, 0.25), 0.0)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.floats(0.1, 3))
def test_boundary_metric_monotone(values, beta):
    psi = np.sort(np.asarray(values))
    g = boundary_metric(EdgeField(psi, 0.3), beta)
    assert np.all(np.diff(g) <= 1e-15)
    assert np.all((g > 0) & (g <= 1))


def test_sparsify_examples():
    s = sparsify_mask(np.ones((4, 4, 4), np.uint8), 2)
    assert len(s[1]) == 8 and len(s[0]) == 0 and len(s[2]) == 0 and len(s[4]) == 0
    pred = np.random.default_rng(0).choice([0, 1, 2, 4], (3, 3, 3)).astype(np.uint8)
    full = sparsify_mask(pred, 1)
    assert sum(len(v) for v in full.values()) == 27
    for lab, coords in full.items():
        assert np.all(pred[tuple(coords.T)] == lab)
    empty = sparsify_mask(np.zeros((4, 4, 4), np.uint8))
    assert len(empty[0]) == 8 and all(len(empty[k]) == 0 for k in (1, 2, 4))
    with pytest.raises(EmptyScribbles):
        sparsify_mask(np.zeros((4, 4, 4), np.uint8), 2, np.zeros((4, 4, 4), bool))


def _field_volume():
    data = np.zeros((4, 6, 6, 6), np.float32)
    data[:] = 0.5
    return MultiModalVolume(data)


def test_potentials_on_scribbles():
    vol = _field_volume()
    scr = {0: np.array([[0, 0, 0]]), 1: np.array([[2, 2, 2]]), 2: np.array([[4, 4, 4]]),
           4: np.array([[0, 4, 0]])}
    f = potentials(scr, vol, PartitionParams(zeta=0.05))
    i1 = f.labels.index(1)
    assert f.h_tilde[i1, 2, 2, 2] == pytest.approx(0.95)
    assert f.h[i1, 2, 2, 2] == pytest.approx(-math.log(0.95))
    assert f.h_tilde[f.labels.index(2), 2, 2, 2] == pytest.approx(0.05 / 3)
    # argmin over labels on a scribble is its own label
    assert f.labels[int(np.argmin(f.h[:, 4, 4, 4]))] == 2
    off = np.ones(vol.dims, bool)
    for c in scr.values():
        off[tuple(c.T)] = False
    assert f.h_tilde[:, off].min() >= 0 and f.h_tilde[:, off].max() <= 1


def test_potentials_symmetry():
    vol = _field_volume()
    scr = {1: np.array([[1, 3, 3]]), 2: np.array([[5, 3, 3]])}
    f = potentials(scr, vol)
    assert f.h_tilde[0, 3, 3, 3] == pytest.approx(f.h_tilde[1, 3, 3, 3])


def test_potentials_too_few_labels():
    with pytest.raises(TooFewLabels):
        potentials({1: np.array([[0, 0, 0]]), 2: np.zeros((0, 3), int)}, _field_volume())


def test_two_label_partition_exact_small(rng):
    for _ in range(40):
        shape = (2, 2, 1) if rng.random() < 0.5 else (3, 2, 2)
        n = int(np.prod(shape))
        h = rng.random((2,) + shape) * 2
        field = PotentialField((1, 2), h, np.exp(-h))
        g = rng.random(shape)
        lam = float(rng.uniform(0.1, 2))
        mask = np.ones(shape, bool)
        out = minimize_partition(field, g, (1.0, 1.0, 1.0), lam, mask)
        unary, edges, w = partition_problem(field, g, (1.0, 1.0, 1.0), lam, mask)
        idx = (out.ravel() == 2).astype(int)
        assert potts_energy(idx, unary, edges, w) == pytest.approx(potts_brute(unary, edges, w),
                                                                   abs=1e-9)
        assert n == len(idx)


def test_identical_potentials_large_lambda_single_label():
    shape = (3, 3, 2)
    h = np.ones((3,) + shape)
    out = minimize_partition(PotentialField((0, 1, 2), h, np.exp(-h)), np.ones(shape), lambda_perim=5)
    assert np.all(out == 0)


def test_multilabel_sweeps_monotone(rng):
    shape = (4, 4, 3)
    h = rng.random((4,) + shape)
    hist = []
    minimize_partition(PotentialField((0, 1, 2, 4), h, np.exp(-h)), rng.random(shape),
                       lambda_perim=0.5, history=hist)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def _phantom(small_phantom):
    vol, labels, tissue = small_phantom
    mask = tissue > 0
    return normalize(vol, mask), labels, mask


def test_densify_keeps_correct_mask(small_phantom):
    vol, labels, mask = _phantom(small_phantom)
    out = densify(labels, vol, mask=mask)
    assert region_dice(out, labels, COMPLETE) >= 0.95


def test_densify_repairs_label_flips(small_phantom):
    vol, labels, mask = _phantom(small_phantom)
    rng = np.random.default_rng(0)
    noisy = labels.copy()
    flip = mask & (rng.random(labels.shape) < 0.3)
    noisy[flip] = rng.choice([0, 1, 2, 4], flip.sum())
    out = densify(noisy, vol, mask=mask)
    assert region_dice(out, labels, COMPLETE) > region_dice(noisy, labels, COMPLETE)


def test_densify_idempotent_in_dice(small_phantom):
    from scipy import ndimage
    vol, labels, mask = _phantom(small_phantom)
    # boundary errors, the typical failure of a network prediction
    shifted = labels.copy()
    grow = ndimage.binary_dilation(labels > 0) & (labels == 0) & mask
    shifted[grow] = 2
    for pred in (labels, shifted):
        once = densify(pred, vol, mask=mask)
        twice = densify(once, vol, mask=mask)
        assert region_dice(twice, once, COMPLETE) >= 0.98


def test_densify_all_background_returns_input(small_phantom):
    vol, labels, mask = _phantom(small_phantom)
    pred = np.zeros_like(labels)
    with pytest.warns(UserWarning):
        out = densify(pred, vol, mask=mask)
    assert np.array_equal(out, pred)
    with pytest.raises(TooFewLabels):
        densify(pred, vol, mask=mask, strict=True)


def test_enhancing_relabel_rule():
    pred = np.zeros((10, 10, 10), np.uint8)
    pred.ravel()[:5] = 4
    out = enhancing_relabel(pred, 10)
    assert (out == 4).sum() == 0 and (out == 1).sum() == 5
    pred.ravel()[:500] = 4
    assert np.array_equal(enhancing_relabel(pred, 10), pred)
    assert np.array_equal(enhancing_relabel(pred[:1], 0), pred[:1])
    with pytest.raises(InvalidConfig):
        enhancing_relabel(pred, -1)


def test_params_validation():
    with pytest.raises(InvalidConfig):
        PartitionParams(zeta=0.6)
    with pytest.raises(InvalidConfig):
        PartitionParams(stride=0)
