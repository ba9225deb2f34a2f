import os
import stat

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tumorseg.errors import DimensionMismatch, EmptyBrain, IoError, MalformedHeader, NonFiniteData
from tumorseg.volume import (COMPLETE, CORE, ENHANCING, MultiModalVolume, RegionSpec, brain_mask,
                             dice, load_labelmap, load_volume, region_dice, region_mask,
                             save_labelmap, save_volume)


def _vol(rng, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    return MultiModalVolume(rng.random((4,) + dims).astype(np.float32), spacing)


def test_volume_roundtrip(tmp_path, rng):
    v = _vol(rng, (8, 6, 5), (1.0, 0.5, 2.0))
    p = tmp_path / "v.mmv"
    save_volume(v, p)
    w = load_volume(p)
    assert w.dims == (8, 6, 5)
    assert w.spacing == (1.0, 0.5, 2.0)
    assert w.data.tobytes() == v.data.tobytes()


def test_header_layout(tmp_path, rng):
    v = _vol(rng, (3, 2, 2))
    p = tmp_path / "v.mmv"
    save_volume(v, p)
    raw = p.read_bytes()
    head, payload = raw.split(b"\n", 1)
    assert b'"dtype": "f32le"' in head
    flat = np.frombuffer(payload, "<f4")
    # channel-major, then z, y, x with x fastest
    assert flat[1] == v.data[0, 1, 0, 0]
    assert flat[3] == v.data[0, 0, 1, 0]
    assert flat[3 * 2 * 2] == v.data[1, 0, 0, 0]


def test_short_payload_is_dimension_mismatch(tmp_path, rng):
    p = tmp_path / "v.mmv"
    save_volume(_vol(rng), p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 8 * 8 * 8 * 4])   # drop one channel
    with pytest.raises(DimensionMismatch):
        load_volume(p)


def test_nan_payload(tmp_path, rng):
    p = tmp_path / "v.mmv"
    save_volume(_vol(rng), p)
    raw = bytearray(p.read_bytes())
    raw[-4:] = np.array([np.nan], "<f4").tobytes()
    p.write_bytes(bytes(raw))
    with pytest.raises(NonFiniteData):
        load_volume(p)


def test_bad_header(tmp_path):
    p = tmp_path / "v.mmv"
    p.write_bytes(b"not json\n1234")
    with pytest.raises(MalformedHeader):
        load_volume(p)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores file permissions")
def test_readonly_dir_is_ioerror(tmp_path, rng):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(stat.S_IRUSR | stat.S_IXUSR)
    with pytest.raises(IoError):
        save_volume(_vol(rng), d / "v.mmv")


def test_missing_dir_is_ioerror(tmp_path, rng):
    with pytest.raises(IoError):
        save_volume(_vol(rng), tmp_path / "nope" / "v.mmv")


@given(arrays(np.uint8, (3, 4, 5), elements=st.sampled_from([0, 1, 2, 4])))
def test_labelmap_roundtrip(tmp_path_factory, labels):
    p = tmp_path_factory.mktemp("l") / "l.mml"
    save_labelmap(labels, p, (1.0, 2.0, 3.0))
    back, spacing = load_labelmap(p, with_spacing=True)
    assert np.array_equal(back, labels)
    assert spacing == (1.0, 2.0, 3.0)


def test_illegal_labels_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_labelmap(np.full((2, 2, 2), 3, np.uint8), tmp_path / "l.mml")


def test_brain_mask():
    data = np.zeros((4, 5, 5, 5), np.float32)
    with pytest.raises(EmptyBrain):
        brain_mask(MultiModalVolume(data))
    data[2, 1, 2, 3] = 0.7
    m = brain_mask(MultiModalVolume(data))
    assert m.sum() == 1 and m[1, 2, 3]


def test_brain_mask_matches_phantom_ellipsoid(small_phantom):
    vol, labels, tissue = small_phantom
    assert brain_mask(vol).sum() == (tissue > 0).sum()


def test_dice_examples():
    a = np.zeros(16, bool)
    b = np.zeros(16, bool)
    a[:8] = True
    b[4:12] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    with pytest.raises(DimensionMismatch):
        dice(np.zeros(3, bool), np.zeros(4, bool))


def test_region_dice_examples():
    gt = np.full((4, 4, 4), 2, np.uint8)
    assert region_dice(np.zeros_like(gt), gt, ENHANCING) == 1.0
    assert region_dice(gt, gt, COMPLETE) == 1.0
    p = np.array([[[1], [2]], [[0], [0]]], np.uint8)
    g = np.array([[[4], [0]], [[2], [0]]], np.uint8)
    assert region_dice(p, g, COMPLETE) == 0.5


def test_region_spec_validation():
    with pytest.raises(ValueError):
        RegionSpec("bad", (0, 1))
    with pytest.raises(ValueError):
        RegionSpec("empty", ())


masks = arrays(bool, 20)


@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


@given(masks)
def test_dice_self_is_one(a):
    assert dice(a, a) == 1.0


@given(arrays(np.uint8, (3, 3, 3), elements=st.sampled_from([0, 1, 2, 4])))
def test_region_nesting(labels):
    c, k, e = (region_mask(labels, r) for r in (COMPLETE, CORE, ENHANCING))
    assert np.all(c >= k) and np.all(k >= e)
