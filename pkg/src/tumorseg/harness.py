"""Noise-robustness sweeps over phantoms, report files and the trend check.

A *method* is any callable ``(volume, brain_mask) -> label map``.  The sweep
perturbs each validation phantom with Gaussian noise at every sigma, runs
every method and scores the three evaluation regions.  The same noise draw
(scaled by sigma) is used for every method and sigma of one (phantom, seed)
cell, so method comparisons share their random numbers.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .cms import CascadeConfig, segment
from .errors import InvalidConfig, MissingCheckpoint, MissingRows
from .octnet import ToyUNet, ToyUNetConfig, build_toy_unet, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_phantom
from .postprocess import PartitionParams, postprocess
from .preprocess import GENERATOR_NAME, NoiseSpec, add_noise, normalize
from .swa import LrSchedule, TrainConfig, train
from .volume import MultiModalVolume, all_region_dice

BASELINE = "baseline"
OCTCONV = "octconv"
OCTCONV_SWA = "octconv+swa"
OCTCONV_SWA_POST = "octconv+swa+post"
TREND_ORDER = (BASELINE, OCTCONV, OCTCONV_SWA, OCTCONV_SWA_POST)
TREND_SIGMAS = (0.02, 0.04)

Method = Callable[[MultiModalVolume, np.ndarray], np.ndarray]


# -- phantoms ----------------------------------------------------------------------

@dataclass
class Case:
    """A normalized phantom with its ground truth and brain mask."""

    name: str
    volume: MultiModalVolume
    labels: np.ndarray
    mask: np.ndarray


def make_cases(n: int, dims=(32, 32, 32), seed0: int = 0, prefix: str = "phantom") -> List[Case]:
    """``n`` normalized phantoms with seeds ``seed0, seed0 + 1, ...``."""
    cases = []
    for i in range(n):
        vol, labels, tissue = generate_phantom(PhantomSpec(dims=tuple(dims), seed=seed0 + i))
        mask = tissue > 0
        cases.append(Case(f"{prefix}{seed0 + i}", normalize(vol, mask), labels, mask))
    return cases


def noise_seed(case_index: int, seed: int) -> int:
    return (int(seed) << 20) ^ int(case_index)


# -- methods -----------------------------------------------------------------------

@dataclass
class CmsMethod:
    config: CascadeConfig = CascadeConfig()

    def __call__(self, volume, mask):
        return segment(volume, mask, self.config)


@dataclass
class NetMethod:
    """Toy U-Net prediction, optionally followed by the energy post-processor."""

    model: ToyUNet
    post: bool = False
    post_params: PartitionParams = PartitionParams()

    def __call__(self, volume, mask):
        pred = self.model.predict(volume.data.astype(np.float64)[None])[0]
        pred[~mask] = 0
        if self.post:
            pred = postprocess(pred, volume, self.post_params, mask)
        return pred


@dataclass
class ToyFamily:
    """The four trend methods plus the runs that produced them."""

    methods: Dict[str, NetMethod]
    loss_history: Dict[str, List[float]] = field(default_factory=dict)


def toy_schedule(epochs: int, lr0: float = 0.01, cycle_len: Optional[int] = None) -> LrSchedule:
    """Two-phase schedule with two phase-2 cycles unless ``cycle_len`` is given."""
    phase2 = epochs // 4
    if epochs % 4 or phase2 < 1:
        raise InvalidConfig("toy training needs a multiple of 4 epochs")
    if cycle_len is None:
        cycle_len = phase2 // 2 if phase2 % 2 == 0 else phase2
    return LrSchedule(total_epochs=epochs, lr0=lr0, cycle_len=cycle_len)


def train_toy_family(cases: Sequence[Case], epochs: int = 40, alpha: float = 0.75, seed: int = 0,
                     base_channels: int = 16, levels: int = 3, lr0: float = 0.01,
                     cycle_len: Optional[int] = None, ckpt_dir: Optional[str] = None,
                     noise_augment: float = 0.0, log=None) -> ToyFamily:
    """Train the plain and the octave toy U-Net on clean ``cases``.

    baseline: plain network, last SGD iterate; octconv: octave network, last
    SGD iterate; octconv+swa: the weight average of the same octave run;
    +post: that model followed by the energy post-processor.
    """
    data = [(c.volume.data.astype(np.float64), c.labels) for c in cases]
    config = TrainConfig(seed=seed, noise_augment=noise_augment,
                         schedule=toy_schedule(epochs, lr0, cycle_len))
    family = ToyFamily({})
    runs = {}
    for name, a in ((BASELINE, 0.0), (OCTCONV, alpha)):
        model = build_toy_unet(ToyUNetConfig(alpha=a, base_channels=base_channels, levels=levels), seed)
        tag = (lambda e, lr, loss, n=name: log(n, e, lr, loss)) if log else None
        state = train(model, data, config, log=tag)
        runs[name] = state
        family.loss_history[name] = state.loss_history
    family.methods[BASELINE] = NetMethod(runs[BASELINE].sgd_model)
    family.methods[OCTCONV] = NetMethod(runs[OCTCONV].sgd_model)
    family.methods[OCTCONV_SWA] = NetMethod(runs[OCTCONV].swa_model)
    family.methods[OCTCONV_SWA_POST] = NetMethod(runs[OCTCONV].swa_model, post=True)
    if ckpt_dir is not None:
        save_family(family, ckpt_dir)
    return family


def save_family(family: ToyFamily, ckpt_dir: str) -> List[str]:
    os.makedirs(ckpt_dir, exist_ok=True)
    paths = []
    for name, method in family.methods.items():
        if method.post:
            continue
        paths += save_checkpoint(method.model, os.path.join(ckpt_dir, name),
                                 extra={"loss_history": family.loss_history.get(name.split("+")[0], [])})
    return paths


def load_family(ckpt_dir: str) -> ToyFamily:
    """Reload the trend methods saved by :func:`save_family`."""
    models = {}
    for name in (BASELINE, OCTCONV, OCTCONV_SWA):
        path = os.path.join(ckpt_dir, name)
        if not (os.path.exists(path + ".json") and os.path.exists(path + ".f64")):
            raise MissingCheckpoint(f"no checkpoint for {name} in {ckpt_dir}")
        models[name] = load_checkpoint(path)
    methods = {n: NetMethod(m) for n, m in models.items()}
    methods[OCTCONV_SWA_POST] = NetMethod(models[OCTCONV_SWA], post=True)
    return ToyFamily(methods)


# -- report ------------------------------------------------------------------------

ROW_FIELDS = ("method", "sigma", "phantom", "seed", "dice_enhancing", "dice_complete", "dice_core")


@dataclass(frozen=True)
class ReportRow:
    method: str
    sigma: float
    phantom: str
    seed: int
    dice_enhancing: float
    dice_complete: float
    dice_core: float


@dataclass
class RobustnessReport:
    rows: List[ReportRow]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            for v in (r.dice_enhancing, r.dice_complete, r.dice_core):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"Dice {v} outside [0, 1] in row {r}")

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    @property
    def sigmas(self) -> List[float]:
        return sorted(set(r.sigma for r in self.rows))

    def cell(self, method: str, sigma: float) -> List[ReportRow]:
        return [r for r in self.rows if r.method == method and np.isclose(r.sigma, sigma)]

    def mean(self, method: str, sigma: float, region: str = "complete") -> float:
        rows = self.cell(method, sigma)
        if not rows:
            raise MissingRows(f"no rows for method {method!r} at sigma={sigma}")
        return float(np.mean([getattr(r, f"dice_{region}") for r in rows]))

    def aggregates(self) -> List[dict]:
        out = []
        for m in self.methods:
            for s in self.sigmas:
                rows = self.cell(m, s)
                if rows:
                    out.append({"method": m, "sigma": s, "n": len(rows),
                                **{f"dice_{k}": self.mean(m, s, k)
                                   for k in ("enhancing", "complete", "core")}})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])

    def to_json(self, path) -> None:
        doc = {"rows": [asdict(r) for r in self.rows], "aggregates": self.aggregates(),
               "manifest": self.manifest}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "RobustnessReport":
        with open(path) as fh:
            doc = json.load(fh)
        return cls([ReportRow(**r) for r in doc["rows"]], doc.get("manifest", {}))

    def table(self) -> str:
        lines = [f"{'method':<20} {'sigma':>6} {'n':>3} {'enh':>6} {'compl':>6} {'core':>6}"]
        for a in self.aggregates():
            lines.append(f"{a['method']:<20} {a['sigma']:>6.3f} {a['n']:>3d} {a['dice_enhancing']:>6.3f} "
                         f"{a['dice_complete']:>6.3f} {a['dice_core']:>6.3f}")
        return "\n".join(lines)


def _run_cell(args):
    name, method, case_index, case, seed, sigmas = args
    rows = []
    for s in sigmas:
        # same seed at every sigma: one standard-normal draw, scaled
        vol = add_noise(case.volume, case.mask, NoiseSpec(float(s), noise_seed(case_index, seed)))
        pred = method(vol, case.mask)
        d = all_region_dice(pred, case.labels)
        rows.append(ReportRow(name, float(s), case.name, int(seed), float(d["Enhancing"]),
                              float(d["Complete"]), float(d["Core"])))
    return rows


def robustness_sweep(methods: Mapping[str, Method], cases: Sequence[Case], sigmas: Sequence[float],
                     seeds: Sequence[int] = (0,), jobs: int = 1,
                     manifest: Optional[dict] = None) -> RobustnessReport:
    """Score every method on every noisy case; rows in (method, sigma, phantom, seed) order.

    ``jobs > 1`` fans the (method, phantom, seed) cells out to worker
    processes, which requires picklable methods.
    """
    if not methods or not cases or not sigmas or not seeds:
        raise InvalidConfig("sweep needs methods, phantoms, sigmas and seeds")
    if any(s < 0 for s in sigmas):
        raise InvalidConfig("sigmas must be >= 0")
    tasks = [(name, m, i, c, s, tuple(sigmas)) for name, m in methods.items()
             for i, c in enumerate(cases) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    flat = [r for rows in results for r in rows]
    order = {n: i for i, n in enumerate(methods)}
    sig_idx = {float(s): i for i, s in enumerate(sigmas)}
    case_idx = {c.name: i for i, c in enumerate(cases)}
    flat.sort(key=lambda r: (order[r.method], sig_idx[r.sigma], case_idx[r.phantom], r.seed))
    info = {"tool_version": __version__, "noise_generator": GENERATOR_NAME,
            "methods": list(methods), "sigmas": [float(s) for s in sigmas],
            "phantoms": [c.name for c in cases], "seeds": [int(s) for s in seeds]}
    info.update(manifest or {})
    return RobustnessReport(flat, info)


# -- trend check -------------------------------------------------------------------

@dataclass
class Comparison:
    name: str
    lhs: float
    rhs: float
    passed: bool


@dataclass
class TrendResult:
    comparisons: List[Comparison]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.comparisons)

    @property
    def violations(self) -> List[str]:
        return [c.name for c in self.comparisons if not c.passed]

    def summary(self) -> str:
        return "\n".join(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.lhs:.4f} vs {c.rhs:.4f}"
                         for c in self.comparisons)


def trend_check(report: RobustnessReport, eps: float = 0.01,
                sigmas: Sequence[float] = TREND_SIGMAS,
                order: Sequence[str] = TREND_ORDER) -> TrendResult:
    """Ordering of mean Complete Dice along ``order`` at each sigma, up to ``eps``.

    Also requires the first method to lose more at the largest sigma than at
    the smallest.  Degradations are measured from sigma = 0 when present; they
    reduce to comparing the two noisy means either way.
    """
    means = {(m, s): report.mean(m, s) for m in order for s in sigmas}
    comps = []
    for s in sigmas:
        for a, b in zip(order, order[1:]):
            lhs, rhs = means[(a, s)], means[(b, s)]
            comps.append(Comparison(f"sigma={s:g}: {a} <= {b}", lhs, rhs, lhs <= rhs + eps))
    base = order[0]
    ref = report.mean(base, 0.0) if report.cell(base, 0.0) else 0.0
    lo, hi = min(sigmas), max(sigmas)
    drop_lo, drop_hi = ref - means[(base, lo)], ref - means[(base, hi)]
    comps.append(Comparison(f"{base} degradation sigma={hi:g} > sigma={lo:g}",
                            drop_hi, drop_lo, drop_hi > drop_lo))
    return TrendResult(comps)


# -- published reference numbers -----------------------------------------------------

# mean Dice (enhancing, complete, core) reported for the noisy-validation ablation
REFERENCE_ABLATION = {
    (BASELINE, 0.02): (0.69, 0.82, 0.76),
    (OCTCONV, 0.02): (0.71, 0.84, 0.77),
    (OCTCONV_SWA, 0.02): (0.74, 0.88, 0.83),
    (OCTCONV_SWA_POST, 0.02): (0.78, 0.89, 0.84),
    (BASELINE, 0.04): (0.66, 0.72, 0.70),
    (OCTCONV, 0.04): (0.69, 0.77, 0.72),
    (OCTCONV_SWA, 0.04): (0.71, 0.82, 0.79),
    (OCTCONV_SWA_POST, 0.04): (0.73, 0.85, 0.81),
}


def reference_report() -> RobustnessReport:
    rows = [ReportRow(m, s, "reference", 0, *v) for (m, s), v in REFERENCE_ABLATION.items()]
    return RobustnessReport(rows, {"source": "published ablation table"})
