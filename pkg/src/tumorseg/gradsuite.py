"""Finite-difference gradient checks for every differentiable op and the toy U-Net."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autograd as ag
from .octnet import OctConvWeights, OctPair, ToyUNetConfig, build_toy_unet, dice_nll_loss, \
    octave_conv3d

TOLERANCE = 1e-5


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return ag.Tensor(x, requires_grad=True)


def _cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[], float]]]:
    """(name, thunk) pairs; each thunk returns the max relative error of one check."""
    cases = []

    def add(name, fn, inputs, **kw):
        cases.append((name, lambda: ag.check_gradients(fn, inputs, **kw)))

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    add("add", lambda t: ag.add(t[0], t[1]), [a, b])
    c, d = _t(rng, 3, 4), _t(rng, 1, 4)
    add("mul (broadcast)", lambda t: ag.mul(t[0], t[1]), [c, d])
    add("neg", lambda t: ag.neg(t[0]), [_t(rng, 5)])
    add("reciprocal", lambda t: ag.reciprocal(t[0]), [_t(rng, 5, positive=True)])
    add("log", lambda t: ag.log(t[0]), [_t(rng, 5, positive=True)])
    add("exp", lambda t: ag.exp(t[0]), [_t(rng, 5)])
    # keep inputs away from the kink at 0
    x = rng.standard_normal(20)
    x += np.sign(x) * 0.1
    add("leaky_relu", lambda t: ag.leaky_relu(t[0], 0.01), [ag.Tensor(x, requires_grad=True)])
    add("sum (axis)", lambda t: ag.tsum(t[0], axis=(0, 2)), [_t(rng, 2, 3, 4)])
    add("reshape", lambda t: ag.reshape(t[0], (4, 6)), [_t(rng, 2, 3, 4)])
    add("concat", lambda t: ag.concat([t[0], t[1]], axis=1), [_t(rng, 1, 2, 3), _t(rng, 1, 3, 3)])
    add("conv3d", lambda t: ag.conv3d(t[0], t[1], t[2]),
        [_t(rng, 2, 3, 4, 4, 4), _t(rng, 2, 3, 3, 3, 3), _t(rng, 2)])
    add("conv3d 1x1x1", lambda t: ag.conv3d(t[0], t[1], t[2]),
        [_t(rng, 1, 3, 2, 2, 2), _t(rng, 4, 3, 1, 1, 1), _t(rng, 4)])
    add("avgpool2", lambda t: ag.avgpool2(t[0]), [_t(rng, 1, 2, 4, 4, 4)])
    add("upsample_nearest2", lambda t: ag.upsample_nearest2(t[0]), [_t(rng, 1, 2, 2, 2, 2)])
    add("instance_norm", lambda t: ag.instance_norm(t[0], t[1], t[2]),
        [_t(rng, 2, 3, 3, 3, 3), _t(rng, 3), _t(rng, 3)])
    add("softmax_channels", lambda t: ag.softmax_channels(t[0]), [_t(rng, 1, 4, 2, 2, 2)])

    ow = OctConvWeights.init(8, 8, 0.75, 0.75, 3, rng)
    for _, p in ow.named():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    xh, xl = _t(rng, 1, 2, 4, 4, 4), _t(rng, 1, 6, 2, 2, 2)
    params = [p for _, p in ow.named()]

    def oct_fn(t):
        y = octave_conv3d(OctPair(t[0], t[1], 0.75), ow, 0.75)
        return ag.concat([ag.reshape(y.high, (-1,)), ag.reshape(y.low, (-1,))], axis=0)
    add("octave_conv3d", oct_fn, [xh, xl] + params, max_entries=20)

    probs = ag.softmax_channels(ag.Tensor(rng.standard_normal((1, 4, 3, 3, 3))))
    p = ag.Tensor(probs.data, requires_grad=True)
    target = rng.choice([0, 1, 2, 4], size=(1, 3, 3, 3))
    add("dice_nll_loss", lambda t: dice_nll_loss(t[0], target), [p], weights=np.ones(()))

    for alpha in (0.0, 0.75):
        model = build_toy_unet(ToyUNetConfig(alpha=alpha), seed=1)
        # jitter away from the exact symmetric initialization: with a single
        # low-branch voxel per channel, instance norm at init sits on the
        # leaky-ReLU kink, where finite differences are meaningless
        for q in model.parameters():
            q.data = q.data + 0.1 * rng.standard_normal(q.shape)
        xin = _t(rng, 1, 4, 8, 8, 8)
        tgt = rng.choice([0, 1, 2, 4], size=(1, 8, 8, 8))
        add(f"toy U-Net alpha={alpha:g} (8^3)",
            lambda t, m=model, x=xin, y=tgt: dice_nll_loss(m(x), y),
            [xin] + model.parameters(), max_entries=5, weights=np.ones(()))
    return cases


def run_suite(seed: int = 0) -> Dict[str, float]:
    """Max relative gradient error per op, in a fixed order."""
    rng = np.random.default_rng(seed)
    return {name: float(thunk()) for name, thunk in _cases(rng)}


def format_table(errors: Dict[str, float], tol: float = TOLERANCE) -> str:
    width = max(len(k) for k in errors)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  ok"]
    for k, v in errors.items():
        lines.append(f"{k:<{width}}  {v:>12.3e}  {'yes' if v < tol else 'NO'}")
    return "\n".join(lines)
