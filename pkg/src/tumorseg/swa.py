"""Two-phase learning-rate schedule, stochastic weight averaging and the training loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .errors import DivergedLoss, EpochOutOfRange, InvalidConfig, ShapeMismatch
from .octnet import ToyUNet, dice_nll_loss
from .preprocess import standard_normal


@dataclass(frozen=True)
class LrSchedule:
    """Constant ``lr0`` for the first ``phase1_frac`` of training, then cosine cycles.

    ``phase1_decay_every > 0`` optionally multiplies the phase-1 rate by
    ``phase1_decay_factor`` every that many epochs.
    """

    total_epochs: int = 80
    lr0: float = 0.01
    phase1_frac: float = 0.75
    cycle_len: int = 10
    lr_cycle_max: Optional[float] = None
    lr_cycle_min: float = 0.0
    phase1_decay_every: int = 0
    phase1_decay_factor: float = 0.5

    def __post_init__(self):
        if self.total_epochs < 1 or self.cycle_len < 1:
            raise InvalidConfig("total_epochs and cycle_len must be >= 1")
        if not 0 < self.phase1_frac < 1:
            raise InvalidConfig("phase1_frac must lie in (0, 1)")
        p1 = self.total_epochs * self.phase1_frac
        if abs(p1 - round(p1)) > 1e-9:
            raise InvalidConfig("total_epochs * phase1_frac must be an integer")
        if (self.total_epochs - round(p1)) % self.cycle_len:
            raise InvalidConfig("phase-2 length must be a multiple of cycle_len")
        if self.lr0 <= 0 or self.lr_cycle_min < 0 or self.cycle_max < self.lr_cycle_min:
            raise InvalidConfig("need lr0 > 0 and 0 <= lr_cycle_min <= lr_cycle_max")

    @property
    def cycle_max(self) -> float:
        return self.lr0 if self.lr_cycle_max is None else self.lr_cycle_max

    @property
    def phase1_epochs(self) -> int:
        return int(round(self.total_epochs * self.phase1_frac))

    @property
    def n_cycles(self) -> int:
        return (self.total_epochs - self.phase1_epochs) // self.cycle_len

    def is_cycle_end(self, epoch: int) -> bool:
        return epoch >= self.phase1_epochs and (epoch - self.phase1_epochs + 1) % self.cycle_len == 0


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.phase1_epochs:
        if schedule.phase1_decay_every > 0:
            return schedule.lr0 * schedule.phase1_decay_factor ** (epoch // schedule.phase1_decay_every)
        return schedule.lr0
    t = (epoch - schedule.phase1_epochs) % schedule.cycle_len
    lo, hi = schedule.lr_cycle_min, schedule.cycle_max
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * t / schedule.cycle_len))


@dataclass
class SwaState:
    w_swa: np.ndarray
    n_models: int = 0


def swa_update(state: SwaState, w) -> SwaState:
    """Fold ``w`` into the running average: ``(w_swa * n + w) / (n + 1)``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != np.shape(state.w_swa):
        raise ShapeMismatch(f"weights {w.shape} vs running average {np.shape(state.w_swa)}")
    n = state.n_models
    return SwaState((state.w_swa * n + w) / (n + 1), n + 1)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 1
    schedule: LrSchedule = LrSchedule()
    momentum: float = 0.9
    weight_decay: float = 1e-5
    noise_augment: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.noise_augment < 0:
            raise InvalidConfig("bad optimizer settings")

    @property
    def epochs(self) -> int:
        return self.schedule.total_epochs


@dataclass
class TrainState:
    sgd_model: ToyUNet
    swa_model: Optional[ToyUNet]
    swa: SwaState
    loss_history: List[float] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)
    snapshot_epochs: List[int] = field(default_factory=list)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def train(model: ToyUNet, dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
          config: TrainConfig = TrainConfig(), log=None) -> TrainState:
    """SGD with momentum under :func:`lr_at`; SWA snapshots at every phase-2 cycle end.

    ``dataset`` holds ``(image (4, D, H, W), labels (D, H, W))`` pairs.  The
    model is trained in place and ends as the last SGD iterate; the SWA model
    is a separate copy.  Determinism: the epoch order comes from a generator
    seeded with ``config.seed``.
    """
    if not dataset:
        raise InvalidConfig("training needs a nonempty dataset")
    # instance norm keeps no running statistics, so averaged weights need no
    # recalibration pass; any other normalization would need one here
    assert model.config.norm == "instance", "SWA without a statistics refresh needs instance norm"
    images = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    labels = np.stack([np.asarray(y) for _, y in dataset])
    sched = config.schedule
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    swa = SwaState(np.zeros(model.n_parameters()), 0)
    state = TrainState(model, None, swa)
    step = 0
    for epoch in range(sched.total_epochs):
        lr = lr_at(sched, epoch)
        losses = []
        for idx in _batches(len(images), config.batch_size, rng):
            x = images[idx]
            if config.noise_augment > 0:
                brain = np.any(x != 0, axis=1, keepdims=True)
                z = standard_normal(config.seed * 1_000_003 + step, x.size).reshape(x.shape)
                x = x + config.noise_augment * z * brain
            model.zero_grad()
            loss = dice_nll_loss(model(ag.Tensor(x)), labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}", state.loss_history + [value])
            loss.backward()
            for p, v in zip(params, velocity):
                g = (p.grad if p.grad is not None else 0.0) + config.weight_decay * p.data
                v *= config.momentum
                v += g
                p.data = p.data - lr * v
            losses.append(value)
            step += 1
        state.loss_history.append(float(np.mean(losses)))
        state.lr_history.append(lr)
        if log is not None:
            log(epoch, lr, state.loss_history[-1])
        if sched.is_cycle_end(epoch):
            state.swa = swa_update(state.swa, model.get_flat())
            state.snapshot_epochs.append(epoch)
    if state.swa.n_models:
        swa_model = copy.deepcopy(model)
        swa_model.set_flat(state.swa.w_swa)
        state.swa_model = swa_model
    return state
