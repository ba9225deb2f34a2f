import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tumorseg.errors import GeometryOverflow, InvalidConfig
from tumorseg.phantom import (DEFAULT_MEANS, TISSUES, PhantomSpec, analytic_volumes,
                              generate_phantom, surface_areas)
from tumorseg.volume import FLAIR


def test_deterministic():
    a = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=11))
    b = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=11))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert np.array_equal(a[1], b[1])
    c = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=12))
    assert not np.array_equal(a[1], c[1])


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_nesting_and_flair_prior(seed):
    vol, labels, tissue = generate_phantom(PhantomSpec(dims=(32, 32, 32), seed=seed))
    brain = tissue > 0
    tumor = labels > 0
    core = np.isin(labels, (1, 4))
    assert np.all(brain[tumor]) and np.all(tumor[core])
    assert (labels == 4).any() and (labels == 2).any() and (labels == 1).any()
    flair = vol.channel(FLAIR)
    assert flair[tumor].mean() > flair[brain & ~tumor].mean()
    assert np.all(vol.data[:, ~brain] == 0)
    assert vol.data.min() >= 0 and vol.data.max() <= 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_counts_match_analytic_volumes(seed):
    spec = PhantomSpec(seed=seed)
    _, labels, tissue = generate_phantom(spec)
    vols, areas = analytic_volumes(spec), surface_areas(spec)
    counts = {"brain": (tissue > 0).sum(), "complete": (labels > 0).sum(),
              "core": np.isin(labels, (1, 4)).sum(), "enhancing": (labels == 4).sum(),
              "edema": (labels == 2).sum()}
    for k, n in counts.items():
        # one surface layer of voxels
        assert abs(n - vols[k]) <= areas[k], k


def test_geometry_overflow():
    with pytest.raises(GeometryOverflow):
        generate_phantom(PhantomSpec(dims=(32, 32, 32), tumor_center=(0.9, 0, 0),
                                     tumor_radius=0.45))


def test_spec_validation():
    means = dict(DEFAULT_MEANS)
    means["edema"] = (0.4, 0.5, 0.6, 0.2)
    with pytest.raises(InvalidConfig):
        PhantomSpec(means=means)
    with pytest.raises(InvalidConfig):
        PhantomSpec(dims=(4, 4, 4))


def test_throughput_64():
    generate_phantom(PhantomSpec(seed=0))
    t = time.perf_counter()
    generate_phantom(PhantomSpec(seed=1))
    assert time.perf_counter() - t < 1.0
