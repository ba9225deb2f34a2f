"""Octave convolutions and a toy 3D U-Net built on :mod:`tumorseg.autograd`.

An octave feature map with ``C`` channels and ratio ``alpha`` keeps
``ceil((1 - alpha) C)`` channels at full resolution (high) and the rest at
half resolution (low).  An octave convolution has four kernel paths::

    Y_H = conv(X_H, W_hh) + up(conv(X_L, W_lh))
    Y_L = conv(X_L, W_ll) + conv(pool(X_H), W_hl)

with 2x2x2 average pooling down and nearest-neighbour upsampling.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidConfig, IoError, MalformedHeader, OddSpatialDims, ShapeMismatch

BLOB_FORMAT_VERSION = 1
CLASS_LABELS = (0, 1, 2, 4)


def split_channels(c: int, alpha: float) -> Tuple[int, int]:
    """(high, low) channel counts for ``c`` channels at octave ratio ``alpha``."""
    if not 0 <= alpha <= 1:
        raise InvalidConfig("alpha must lie in [0, 1]")
    high = int(math.ceil((1 - alpha) * c - 1e-9))
    return high, c - high


@dataclass
class OctPair:
    """High- and low-frequency halves of an octave feature map (either may be absent)."""

    high: Optional[Tensor]
    low: Optional[Tensor]
    alpha: float = 0.0

    def __post_init__(self):
        if self.high is not None and self.low is not None:
            hs, ls = self.high.shape, self.low.shape
            if hs[0] != ls[0] or tuple(2 * s for s in ls[2:]) != tuple(hs[2:]):
                raise ShapeMismatch(f"low branch {ls} is not half of high branch {hs}")

    @property
    def channels(self) -> Tuple[int, int]:
        return (0 if self.high is None else self.high.shape[1],
                0 if self.low is None else self.low.shape[1])

    def map(self, fn) -> "OctPair":
        return OctPair(None if self.high is None else fn(self.high, "high"),
                       None if self.low is None else fn(self.low, "low"), self.alpha)

    @classmethod
    def from_tensor(cls, x: Tensor, alpha: float) -> "OctPair":
        """Split channels of ``x``; low channels are average-pooled."""
        hi, lo = split_channels(x.shape[1], alpha)
        high = None if hi == 0 else _channels(x, 0, hi)
        low = None if lo == 0 else ag.avgpool2(_channels(x, hi, hi + lo))
        return cls(high, low, alpha)


def _channels(x: Tensor, start: int, stop: int) -> Tensor:
    if start == 0 and stop == x.shape[1]:
        return x

    def back(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)
    return ag._make(x.data[:, start:stop].copy(), (x,), back)


def concat_pairs(a: OctPair, b: OctPair) -> OctPair:
    def cat(u, v):
        if u is None:
            return v
        if v is None:
            return u
        return ag.concat([u, v], axis=1)
    return OctPair(cat(a.high, b.high), cat(a.low, b.low), a.alpha)


# -- octave convolution ---------------------------------------------------------------

@dataclass
class OctConvWeights:
    """Kernels and biases of the four paths; paths without channels are ``None``."""

    w_hh: Optional[Tensor] = None
    w_hl: Optional[Tensor] = None
    w_lh: Optional[Tensor] = None
    w_ll: Optional[Tensor] = None
    b_hh: Optional[Tensor] = None
    b_hl: Optional[Tensor] = None
    b_lh: Optional[Tensor] = None
    b_ll: Optional[Tensor] = None

    def named(self) -> List[Tuple[str, Tensor]]:
        out = []
        for path in ("hh", "hl", "lh", "ll"):
            for kind in ("w", "b"):
                t = getattr(self, f"{kind}_{path}")
                if t is not None:
                    out.append((f"{kind}_{path}", t))
        return out

    @classmethod
    def init(cls, cin: int, cout: int, alpha_in: float, alpha_out: float, k: int,
             rng: np.random.Generator) -> "OctConvWeights":
        """He-normal kernels (fan-in of the whole input), zero biases."""
        hi_in, lo_in = split_channels(cin, alpha_in)
        hi_out, lo_out = split_channels(cout, alpha_out)
        std = math.sqrt(2.0 / (cin * k ** 3))
        kw = {}
        for path, ci, co in (("hh", hi_in, hi_out), ("hl", hi_in, lo_out),
                             ("lh", lo_in, hi_out), ("ll", lo_in, lo_out)):
            if ci and co:
                kw[f"w_{path}"] = ag.parameter(rng.standard_normal((co, ci, k, k, k)) * std)
                kw[f"b_{path}"] = ag.parameter(np.zeros(co))
        return cls(**kw)


def octave_conv3d(x: OctPair, w: OctConvWeights, alpha_out: Optional[float] = None) -> OctPair:
    """Four-path octave convolution (see module docstring)."""
    def need_even(t):
        if any(s % 2 for s in t.shape[2:]):
            raise OddSpatialDims(f"high branch {t.shape} cannot feed a low branch")

    y_h = y_l = None
    if w.w_hh is not None:
        if x.high is None:
            raise ShapeMismatch("W_hh given but input has no high branch")
        y_h = ag.conv3d(x.high, w.w_hh, w.b_hh)
    if w.w_lh is not None:
        if x.low is None:
            raise ShapeMismatch("W_lh given but input has no low branch")
        up = ag.upsample_nearest2(ag.conv3d(x.low, w.w_lh, w.b_lh))
        y_h = up if y_h is None else y_h + up
    if w.w_ll is not None:
        if x.low is None:
            raise ShapeMismatch("W_ll given but input has no low branch")
        y_l = ag.conv3d(x.low, w.w_ll, w.b_ll)
    if w.w_hl is not None:
        if x.high is None:
            raise ShapeMismatch("W_hl given but input has no high branch")
        need_even(x.high)
        down = ag.conv3d(ag.avgpool2(x.high), w.w_hl, w.b_hl)
        y_l = down if y_l is None else y_l + down
    return OctPair(y_h, y_l, x.alpha if alpha_out is None else alpha_out)


def octave_mac_count(cin: int, cout: int, spatial: Sequence[int], alpha_in: float,
                     alpha_out: Optional[float] = None, k: int = 3) -> int:
    """Multiply-adds of one octave convolution at full-resolution size ``spatial``."""
    alpha_out = alpha_in if alpha_out is None else alpha_out
    hi_in, lo_in = split_channels(cin, alpha_in)
    hi_out, lo_out = split_channels(cout, alpha_out)
    full = int(np.prod(spatial))
    half = full // 8
    k3 = k ** 3
    return k3 * (hi_in * hi_out * full + lo_in * lo_out * half
                 + lo_in * hi_out * half + hi_in * lo_out * half)


def conv_mac_count(cin: int, cout: int, spatial: Sequence[int], k: int = 3) -> int:
    return k ** 3 * cin * cout * int(np.prod(spatial))


# -- toy U-Net -------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyUNetConfig:
    in_channels: int = 4
    classes: int = 4
    levels: int = 3
    base_channels: int = 8
    alpha: float = 0.0
    leaky_slope: float = 0.01
    norm: str = "instance"

    def __post_init__(self):
        if self.in_channels < 1 or self.classes < 2 or self.levels < 1 or self.base_channels < 1:
            raise InvalidConfig("channel, class and level counts must be positive")
        if not 0 <= self.alpha < 1:
            raise InvalidConfig("alpha must lie in [0, 1) (the first layer needs a high branch)")
        if self.norm != "instance":
            raise InvalidConfig("only instance normalization is supported")
        for lvl in range(self.levels):
            hi, lo = split_channels(self.base_channels * 2 ** lvl, self.alpha)
            if self.alpha > 0 and hi == 0:
                raise InvalidConfig("every level needs at least one high channel")

    @property
    def min_divisor(self) -> int:
        """Input patches must have spatial dims divisible by this."""
        return 2 ** (self.levels - 1 + (1 if self.alpha > 0 else 0))


class ConvBlock:
    """(Octave) 3x3x3 convolution, instance norm per branch, leaky ReLU."""

    def __init__(self, cin, cout, alpha_in, alpha_out, rng, slope):
        self.alpha_in, self.alpha_out, self.slope = alpha_in, alpha_out, slope
        self.cin, self.cout = cin, cout
        self.weights = OctConvWeights.init(cin, cout, alpha_in, alpha_out, 3, rng)
        hi, lo = split_channels(cout, alpha_out)
        self.norm = {}
        for branch, c in (("high", hi), ("low", lo)):
            if c:
                self.norm[branch] = (ag.parameter(np.ones(c)), ag.parameter(np.zeros(c)))

    def named(self):
        out = list(self.weights.named())
        for branch in ("high", "low"):
            if branch in self.norm:
                g, b = self.norm[branch]
                out += [(f"norm_{branch}_scale", g), (f"norm_{branch}_shift", b)]
        return out

    def __call__(self, x: OctPair) -> OctPair:
        y = octave_conv3d(x, self.weights, self.alpha_out)

        def post(t, branch):
            g, b = self.norm[branch]
            return ag.leaky_relu(ag.instance_norm(t, g, b), self.slope)
        return y.map(post)

    def macs(self, spatial) -> int:
        return octave_mac_count(self.cin, self.cout, spatial, self.alpha_in, self.alpha_out)


class ToyUNet:
    """Encoder/decoder with skip connections; outputs per-voxel class probabilities."""

    def __init__(self, config: ToyUNetConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        a, s = config.alpha, config.leaky_slope
        ch = [config.base_channels * 2 ** i for i in range(config.levels)]
        self.encoder: List[Tuple[ConvBlock, ConvBlock]] = []
        cin, a_in = config.in_channels, 0.0
        for c in ch:
            self.encoder.append((ConvBlock(cin, c, a_in, a, rng, s), ConvBlock(c, c, a, a, rng, s)))
            cin, a_in = c, a
        self.decoder: List[Tuple[ConvBlock, ConvBlock]] = []
        for lvl in range(config.levels - 2, -1, -1):
            c = ch[lvl]
            self.decoder.append((ConvBlock(cin + c, c, a, a, rng, s), ConvBlock(c, c, a, a, rng, s)))
            cin = c
        std = math.sqrt(2.0 / cin)
        self.head_w = ag.parameter(rng.standard_normal((config.classes, cin, 1, 1, 1)) * std)
        self.head_b = ag.parameter(np.zeros(config.classes))

    # -- parameters --------------------------------------------------------------------
    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Canonical parameter walk: encoder, decoder, head; paths hh, hl, lh, ll."""
        out = []
        for i, blocks in enumerate(self.encoder):
            for j, blk in enumerate(blocks):
                out += [(f"enc{i}.{j}.{n}", t) for n, t in blk.named()]
        for i, blocks in enumerate(self.decoder):
            for j, blk in enumerate(blocks):
                out += [(f"dec{i}.{j}.{n}", t) for n, t in blk.named()]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.parameters()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_parameters():
            raise ShapeMismatch(f"expected {self.n_parameters()} values, got {flat.size}")
        pos = 0
        for t in self.parameters():
            t.data = flat[pos:pos + t.data.size].reshape(t.data.shape).copy()
            pos += t.data.size

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    # -- forward -----------------------------------------------------------------------
    def _check_input(self, x: Tensor):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (N, {self.config.in_channels}, D, H, W), got {x.shape}")
        if any(s % self.config.min_divisor for s in x.shape[2:]):
            raise OddSpatialDims(
                f"spatial dims {x.shape[2:]} must be divisible by {self.config.min_divisor}")

    def logits(self, x) -> Tensor:
        x = ag.as_tensor(x)
        self._check_input(x)
        h = OctPair(x, None, 0.0)
        skips = []
        for lvl, (b1, b2) in enumerate(self.encoder):
            h = b2(b1(h))
            if lvl < len(self.encoder) - 1:
                skips.append(h)
                h = h.map(lambda t, _: ag.avgpool2(t))
        for (b1, b2), skip in zip(self.decoder, reversed(skips)):
            h = h.map(lambda t, _: ag.upsample_nearest2(t))
            h = b2(b1(concat_pairs(h, skip)))
        if h.low is not None:
            up = ag.upsample_nearest2(h.low)
            out = up if h.high is None else ag.concat([h.high, up], axis=1)
        else:
            out = h.high
        return ag.conv3d(out, self.head_w, self.head_b)

    def __call__(self, x) -> Tensor:
        return ag.softmax_channels(self.logits(x))

    def predict(self, x) -> np.ndarray:
        """Label map(s) ``(N, D, H, W)`` in {0, 1, 2, 4}."""
        with ag.no_grad():
            probs = self(x).data
        return np.asarray(CLASS_LABELS, dtype=np.uint8)[probs.argmax(axis=1)]

    def mac_count(self, spatial: Sequence[int]) -> int:
        """Multiply-adds of all convolutions for one input of size ``spatial``."""
        total = 0
        size = np.asarray(spatial)
        for lvl, (b1, b2) in enumerate(self.encoder):
            total += b1.macs(size) + b2.macs(size)
            if lvl < len(self.encoder) - 1:
                size = size // 2
        for b1, b2 in self.decoder:
            size = size * 2
            total += b1.macs(size) + b2.macs(size)
        total += int(np.prod(spatial)) * self.head_w.shape[0] * self.head_w.shape[1]
        return total


def build_toy_unet(config: ToyUNetConfig = ToyUNetConfig(), seed: int = 0) -> ToyUNet:
    return ToyUNet(config, seed)


# -- loss ----------------------------------------------------------------------------------

def labels_to_classes(labels) -> np.ndarray:
    """Map {0, 1, 2, 4} to class indices {0, 1, 2, 3}."""
    labels = np.asarray(labels)
    lut = np.full(256, -1, np.int64)
    for i, lab in enumerate(CLASS_LABELS):
        lut[lab] = i
    out = lut[labels.astype(np.uint8)]
    if (out < 0).any():
        raise ValueError("labels outside {0, 1, 2, 4}")
    return out


def one_hot(labels, classes: int = 4) -> np.ndarray:
    """``(N, D, H, W)`` labels -> ``(N, classes, D, H, W)`` indicator array."""
    idx = labels_to_classes(labels)
    return np.moveaxis(np.eye(classes)[idx], -1, 1)


def dice_nll_loss(probs: Tensor, target, eps: float = 1e-5) -> Tensor:
    """``1 - mean foreground soft Dice`` plus mean negative log-likelihood."""
    probs = ag.as_tensor(probs)
    t = one_hot(target, probs.shape[1])
    if t.shape != probs.shape:
        raise ShapeMismatch(f"target {t.shape} does not match probabilities {probs.shape}")
    axes = (0, 2, 3, 4)
    inter = (probs * t).sum(axis=axes)
    denom = probs.sum(axis=axes) + t.sum(axis=axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    fg = ag.Tensor(np.r_[0.0, np.ones(probs.shape[1] - 1)] / (probs.shape[1] - 1))
    soft_dice = (dice * fg).sum()
    p_true = (probs * t).sum(axis=1)
    nll = -ag.log(p_true).mean()
    return (1.0 - soft_dice) + nll


# -- checkpoints ---------------------------------------------------------------------------

def save_checkpoint(model: ToyUNet, path, extra: Optional[dict] = None,
                    flat: Optional[np.ndarray] = None) -> Tuple[str, str]:
    """Write ``<path>.json`` (config, seed, parameter walk) and ``<path>.f64`` (little-endian blob)."""
    flat = model.get_flat() if flat is None else np.asarray(flat, dtype=np.float64)
    manifest = {
        "format_version": BLOB_FORMAT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "parameters": [{"name": n, "shape": list(t.shape)} for n, t in model.named_parameters()],
        "n_values": int(flat.size),
        "extra": extra or {},
    }
    jpath, bpath = f"{path}.json", f"{path}.f64"
    try:
        with open(jpath, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        with open(bpath, "wb") as fh:
            fh.write(flat.astype("<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return jpath, bpath


def load_checkpoint(path) -> ToyUNet:
    jpath, bpath = f"{path}.json", f"{path}.f64"
    try:
        with open(jpath) as fh:
            manifest = json.load(fh)
        with open(bpath, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{jpath}: {exc}") from exc
    if manifest.get("format_version") != BLOB_FORMAT_VERSION:
        raise MalformedHeader(f"{jpath}: unsupported format version {manifest.get('format_version')}")
    model = ToyUNet(ToyUNetConfig(**manifest["config"]), manifest["seed"])
    walk = [{"name": n, "shape": list(t.shape)} for n, t in model.named_parameters()]
    if walk != manifest["parameters"]:
        raise MalformedHeader(f"{jpath}: parameter walk does not match the configuration")
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != model.n_parameters():
        raise ShapeMismatch(f"{bpath}: holds {flat.size} values, expected {model.n_parameters()}")
    model.set_flat(flat.astype(np.float64))
    return model
