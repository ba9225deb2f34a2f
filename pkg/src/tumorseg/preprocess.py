"""Per-modality intensity normalization and Gaussian noise perturbation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBrain, ZeroVariance
from .volume import MultiModalVolume

GENERATOR_NAME = "splitmix64-counter/box-muller"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NormalizationParams:
    clip_low_pct: float = 0.5
    clip_high_pct: float = 99.5

    def __post_init__(self):
        if not 0 < self.clip_low_pct < self.clip_high_pct < 100:
            raise ValueError("need 0 < clip_low_pct < clip_high_pct < 100")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0
    brain_only: bool = True

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be finite and >= 0")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` outputs of the splitmix64 sequence started at ``seed``.

    Output ``i`` depends only on ``(seed, offset + i)``, so any slice of the
    stream can be produced independently.
    """
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def standard_normal(seed: int, n: int) -> np.ndarray:
    """Deterministic N(0, 1) draws via Box-Muller on splitmix64 uniforms."""
    m = (n + 1) // 2
    bits = splitmix64(seed, 2 * m)
    scale = 1.0 / float(1 << 53)
    # u1 in (0, 1] keeps the log finite, u2 in [0, 1)
    u1 = ((bits[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * scale
    u2 = (bits[1::2] >> np.uint64(11)).astype(np.float64) * scale
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]


def normalize(volume: MultiModalVolume, mask, params: NormalizationParams = NormalizationParams()):
    """Z-score each modality over the brain, clip outliers, rescale brain voxels to [0, 1]."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyBrain("normalization needs a nonempty brain mask")
    out = np.zeros(volume.data.shape, dtype=np.float32)
    for c in range(volume.data.shape[0]):
        x = volume.data[c].astype(np.float64)
        brain = x[mask]
        mean, std = brain.mean(), brain.std()
        if not std > 0:
            raise ZeroVariance(f"modality {c} is constant over the brain")
        z = (x - mean) / std
        lo, hi = np.percentile(z[mask], [params.clip_low_pct, params.clip_high_pct])
        z = np.clip(z, lo, hi)
        zb = z[mask]
        zmin, zmax = zb.min(), zb.max()
        if zmax > zmin:
            z = (z - zmin) / (zmax - zmin)
        else:
            z = np.zeros_like(z)
        z[~mask] = 0.0
        out[c] = z
    return volume.replace(out)


def add_noise(volume: MultiModalVolume, mask, spec: NoiseSpec) -> MultiModalVolume:
    """Add N(0, sigma^2) to every brain voxel of every modality.

    Modality ``c`` draws from the stream seeded with ``seed ^ c``; voxels take
    draws in C order of the ``(nx, ny, nz)`` grid.  Output is not re-clipped.
    """
    if spec.sigma == 0:
        return volume
    mask = np.asarray(mask, dtype=bool)
    if not spec.brain_only:
        mask = np.ones(volume.dims, dtype=bool)
    out = volume.data.astype(np.float64)
    n = int(mask.sum())
    for c in range(out.shape[0]):
        noise = standard_normal(int(spec.seed) ^ c, n) * spec.sigma
        ch = out[c]
        ch[mask] += noise
    return volume.replace(out.astype(np.float32))
