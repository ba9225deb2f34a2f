"""Multi-modal volumes, label maps, file IO and Dice evaluation.

In memory a volume is a float32 array of shape ``(4, nx, ny, nz)`` indexed
``data[channel, x, y, z]``; label maps are uint8 arrays of shape
``(nx, ny, nz)``.  On disk the payload is channel-major, then z, then y, with
x varying fastest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptyBrain, IoError, MalformedHeader, NonFiniteData

MODALITIES = ("T1", "T1c", "T2", "FLAIR")
LEGAL_LABELS = (0, 1, 2, 4)

T1, T1C, T2, FLAIR = range(4)


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: Tuple[int, ...]

    def __post_init__(self):
        if not self.labels or not set(self.labels) <= {1, 2, 4}:
            raise ValueError(f"illegal label set for region {self.name}: {self.labels}")


ENHANCING = RegionSpec("Enhancing", (4,))
COMPLETE = RegionSpec("Complete", (1, 2, 4))
CORE = RegionSpec("Core", (1, 4))
REGIONS = (ENHANCING, COMPLETE, CORE)


@dataclass(frozen=True, eq=False)
class MultiModalVolume:
    """Four co-registered scalar volumes with voxel spacing in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)   # own copy; frozen below
        if data.ndim != 4 or data.shape[0] != len(MODALITIES) or min(data.shape[1:]) < 1:
            raise DimensionMismatch(f"expected (4, nx, ny, nz) channels, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteData("volume contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def channel(self, name_or_index) -> np.ndarray:
        if isinstance(name_or_index, str):
            name_or_index = MODALITIES.index(name_or_index)
        return self.data[name_or_index]

    def replace(self, data) -> "MultiModalVolume":
        return MultiModalVolume(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, MultiModalVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


def check_labelmap(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionMismatch(f"label map must be 3D, got shape {labels.shape}")
    bad = ~np.isin(labels, LEGAL_LABELS)
    if bad.any():
        raise ValueError(f"illegal labels present: {sorted(set(np.unique(labels[bad]).tolist()))}")
    return labels.astype(np.uint8, copy=False)


# -- file IO -----------------------------------------------------------------

def _header(dims, spacing, channels, dtype) -> bytes:
    head = {"dims": [int(d) for d in dims], "spacing": [float(s) for s in spacing],
            "channels": list(channels), "dtype": dtype}
    return (json.dumps(head) + "\n").encode("utf-8")


def _write(path, header: bytes, payload: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read(path):
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not line.endswith(b"\n"):
        raise MalformedHeader(f"{path}: header line is not newline-terminated")
    try:
        head = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(head, dict) or not {"dims", "spacing", "channels", "dtype"} <= set(head):
        raise MalformedHeader(f"{path}: header lacks dims/spacing/channels/dtype")
    dims, spacing = head["dims"], head["spacing"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise MalformedHeader(f"{path}: dims must be three positive integers")
    if (not isinstance(spacing, list) or len(spacing) != 3
            or not all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
        raise MalformedHeader(f"{path}: spacing must be three positive numbers")
    if not isinstance(head["channels"], list):
        raise MalformedHeader(f"{path}: channels must be a list")
    return head, payload


def _to_disk_order(arr: np.ndarray) -> np.ndarray:
    # (c, x, y, z) -> (c, z, y, x) so that x is fastest in C order
    return np.ascontiguousarray(arr.transpose(0, 3, 2, 1))


def _from_disk_order(flat: np.ndarray, nc: int, dims) -> np.ndarray:
    nx, ny, nz = dims
    return np.ascontiguousarray(flat.reshape(nc, nz, ny, nx).transpose(0, 3, 2, 1))


def save_volume(volume: MultiModalVolume, path) -> None:
    header = _header(volume.dims, volume.spacing, MODALITIES, "f32le")
    _write(path, header, _to_disk_order(volume.data).astype("<f4").tobytes())


def load_volume(path) -> MultiModalVolume:
    head, payload = _read(path)
    if head["dtype"] != "f32le" or list(head["channels"]) != list(MODALITIES):
        raise MalformedHeader(f"{path}: expected 4 f32le channels {list(MODALITIES)}")
    dims = head["dims"]
    expected = 4 * int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise DimensionMismatch(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteData(f"{path}: payload contains NaN or Inf")
    return MultiModalVolume(_from_disk_order(flat, 4, dims), tuple(head["spacing"]))


def save_labelmap(labels, path, spacing=(1.0, 1.0, 1.0)) -> None:
    labels = check_labelmap(labels)
    header = _header(labels.shape, spacing, ["labels"], "u8")
    _write(path, header, _to_disk_order(labels[None]).tobytes())


def load_labelmap(path, with_spacing: bool = False):
    head, payload = _read(path)
    if head["dtype"] != "u8" or list(head["channels"]) != ["labels"]:
        raise MalformedHeader(f"{path}: expected a single u8 'labels' channel")
    dims = head["dims"]
    if len(payload) != int(np.prod(dims)):
        raise DimensionMismatch(
            f"{path}: payload holds {len(payload)} bytes, header implies {int(np.prod(dims))}")
    labels = check_labelmap(_from_disk_order(np.frombuffer(payload, dtype=np.uint8), 1, dims)[0])
    if with_spacing:
        return labels, tuple(float(s) for s in head["spacing"])
    return labels


# -- masks and metrics ----------------------------------------------------------

def brain_mask(volume: MultiModalVolume) -> np.ndarray:
    """Voxels where any channel is nonzero (inputs are skull-stripped)."""
    mask = np.any(volume.data != 0, axis=0)
    if not mask.any():
        raise EmptyBrain("no nonzero voxel in any channel")
    return mask


def dice(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & gt)) / total


def region_mask(labels, region: RegionSpec) -> np.ndarray:
    return np.isin(labels, region.labels)


def region_dice(pred, gt, region: RegionSpec) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    return dice(region_mask(pred, region), region_mask(gt, region))


def all_region_dice(pred, gt, regions: Sequence[RegionSpec] = REGIONS) -> dict:
    return {r.name: region_dice(pred, gt, r) for r in regions}
