"""Synthetic brain-tumor phantoms with analytic ground truth.

A phantom is a brain ellipsoid holding a spherical tumor made of concentric
shells: a dark necrotic centre and a non-enhancing core (label 1), an
enhancing rim (label 4) and surrounding edema (label 2).  Each tissue has a
mean intensity per modality plus smooth low-frequency texture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import GeometryOverflow, InvalidConfig
from .volume import MODALITIES, MultiModalVolume

TISSUES = ("background", "brain", "edema", "core", "enhancing", "necrosis")
TISSUE_LABEL = {"background": 0, "brain": 0, "edema": 2, "core": 1, "enhancing": 4, "necrosis": 1}

# tissue -> (T1, T1c, T2, FLAIR) mean intensity
DEFAULT_MEANS: Dict[str, Tuple[float, float, float, float]] = {
    "background": (0.0, 0.0, 0.0, 0.0),
    "brain": (0.55, 0.45, 0.35, 0.35),
    "edema": (0.45, 0.52, 0.70, 0.75),
    "core": (0.40, 0.80, 0.60, 0.65),
    "enhancing": (0.45, 0.95, 0.55, 0.68),
    "necrosis": (0.25, 0.12, 0.85, 0.60),
}
DEFAULT_TEXTURE = 0.03


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom geometry and appearance.

    Lengths are in voxels; ``brain_semi_axes`` are fractions of ``dims``.
    ``tumor_center`` is an offset from the brain centre as a fraction of the
    semi-axes (drawn from ``seed`` when ``None``).  ``tumor_radius`` is a
    fraction of the smallest brain semi-axis.
    """

    dims: Tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_semi_axes: Tuple[float, float, float] = (0.40, 0.44, 0.38)
    tumor_center: Optional[Tuple[float, float, float]] = None
    tumor_radius: Optional[float] = None
    edema_thickness: float = 0.25
    rim_thickness: float = 0.18
    necrosis_radius: float = 0.5
    means: Dict[str, Tuple[float, float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_MEANS))
    texture: float = DEFAULT_TEXTURE
    texture_scale: float = 4.0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise InvalidConfig("phantom dims must be three sizes >= 8")
        if not all(0 < a < 0.5 for a in self.brain_semi_axes):
            raise InvalidConfig("brain semi-axes must be fractions in (0, 0.5)")
        for name, vals in self.means.items():
            if name not in TISSUES or len(vals) != 4 or not all(0 <= v <= 1 for v in vals):
                raise InvalidConfig(f"bad intensity entry for {name}")
        brain_flair = self.means["brain"][3]
        if not all(self.means[t][3] > brain_flair for t in ("edema", "core", "enhancing", "necrosis")):
            raise InvalidConfig("tumor tissues must be brighter than brain on FLAIR")
        if not (0 < self.edema_thickness < 1 and 0 < self.rim_thickness < 1
                and 0 <= self.necrosis_radius < 1):
            raise InvalidConfig("shell fractions must lie in (0, 1)")


@dataclass(frozen=True)
class PhantomGeometry:
    center: np.ndarray
    semi_axes: np.ndarray
    tumor_center: np.ndarray
    tumor_radius: float
    radii: Dict[str, float]


def _geometry(spec: PhantomSpec) -> PhantomGeometry:
    rng = np.random.default_rng([spec.seed, 1])
    dims = np.asarray(spec.dims, dtype=np.float64)
    center = (dims - 1) / 2
    semi = np.asarray(spec.brain_semi_axes) * dims
    radius = spec.tumor_radius if spec.tumor_radius is not None else rng.uniform(0.36, 0.46)
    r = radius * semi.min()
    if spec.tumor_center is not None:
        offset = np.asarray(spec.tumor_center, dtype=np.float64)
    else:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.0, 0.3)
    tc = center + offset * semi
    # each shell radius as a fraction of the outer tumor radius
    core = r * (1 - spec.edema_thickness)
    radii = {"edema": r, "core": core, "rim_inner": core * (1 - spec.rim_thickness),
             "necrosis": core * spec.necrosis_radius}
    return PhantomGeometry(center, semi, tc, r, radii)


def _inside_brain(points, geo: PhantomGeometry) -> np.ndarray:
    return (((points - geo.center) / geo.semi_axes) ** 2).sum(axis=-1) <= 1.0


def generate_phantom(spec: PhantomSpec = PhantomSpec()):
    """Deterministic ``(MultiModalVolume, labels, tissue map)`` for ``spec``.

    The tissue map holds indices into :data:`TISSUES`.
    """
    geo = _geometry(spec)
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in spec.dims],
                                indexing="ij"), axis=-1)
    brain = _inside_brain(grid, geo)
    dist = np.sqrt(((grid - geo.tumor_center) ** 2).sum(axis=-1))
    tumor = dist <= geo.radii["edema"]
    if not np.all(brain[tumor]) or not _sphere_inside(geo):
        raise GeometryOverflow("tumor sphere leaves the brain ellipsoid")

    tissue = np.zeros(spec.dims, np.int64)
    tissue[brain] = TISSUES.index("brain")
    tissue[tumor] = TISSUES.index("edema")
    tissue[dist <= geo.radii["core"]] = TISSUES.index("enhancing")
    tissue[dist <= geo.radii["rim_inner"]] = TISSUES.index("core")
    tissue[dist <= geo.radii["necrosis"]] = TISSUES.index("necrosis")

    table = np.array([spec.means[t] for t in TISSUES], dtype=np.float64)
    rng = np.random.default_rng([spec.seed, 2])
    data = np.empty((len(MODALITIES),) + tuple(spec.dims), np.float64)
    for c in range(len(MODALITIES)):
        noise = ndimage.gaussian_filter(rng.standard_normal(spec.dims), spec.texture_scale,
                                        mode="wrap")
        noise /= max(noise.std(), 1e-12)
        data[c] = table[tissue, c] + spec.texture * noise
    data = np.clip(data, 0.05, 1.0)
    data[:, ~brain] = 0.0

    labels = np.zeros(spec.dims, np.uint8)
    for name, lab in TISSUE_LABEL.items():
        labels[tissue == TISSUES.index(name)] = lab
    return MultiModalVolume(data.astype(np.float32), spec.spacing), labels, tissue


def _sphere_inside(geo: PhantomGeometry) -> bool:
    # sample the tumor surface densely; the voxel test above covers the grid
    u = np.random.default_rng(0).standard_normal((2000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return bool(np.all(_inside_brain(geo.tumor_center + geo.tumor_radius * u, geo)))


def analytic_volumes(spec: PhantomSpec) -> Dict[str, float]:
    """Continuous volumes (voxel units) of the brain and the tumor label regions."""
    geo = _geometry(spec)
    sphere = lambda r: 4.0 / 3.0 * np.pi * r ** 3
    return {
        "brain": sphere(1.0) * float(np.prod(geo.semi_axes)),
        "complete": sphere(geo.radii["edema"]),
        "core": sphere(geo.radii["core"]),
        "enhancing": sphere(geo.radii["core"]) - sphere(geo.radii["rim_inner"]),
        "edema": sphere(geo.radii["edema"]) - sphere(geo.radii["core"]),
    }


def surface_areas(spec: PhantomSpec) -> Dict[str, float]:
    """Approximate surface areas bounding each analytic region (for tolerances)."""
    geo = _geometry(spec)
    a, b, c = geo.semi_axes
    p = 1.6075
    ellipsoid = 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
    sph = lambda r: 4 * np.pi * r ** 2
    return {
        "brain": ellipsoid,
        "complete": sph(geo.radii["edema"]),
        "core": sph(geo.radii["core"]),
        "enhancing": sph(geo.radii["core"]) + sph(geo.radii["rim_inner"]),
        "edema": sph(geo.radii["edema"]) + sph(geo.radii["core"]),
    }
