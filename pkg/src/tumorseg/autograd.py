"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every op builds an output :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  ``backward`` walks
the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import OddSpatialDims, ShapeMismatch

DEBUG = False
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values produced in forward pass")

    # -- basics -------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic ---------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return _make(out, tensors, back)


# -- volumetric ops ---------------------------------------------------------------------

def _check_5d(x: Tensor, name: str):
    if x.ndim != 5:
        raise ShapeMismatch(f"{name} expects (N, C, D, H, W), got {x.shape}")


def _im2col(xp, k, d, h, w):
    """Padded ``(N, C, D+k-1, ...)`` -> ``(N, C*k^3, D*H*W)`` patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(n, c * k ** 3, d * h * w)


def conv3d(x, w, b=None) -> Tensor:
    """Zero-padded ("same") 3D cross-correlation with an odd cubic kernel.

    ``x``: (N, Cin, D, H, W); ``w``: (Cout, Cin, k, k, k); ``b``: (Cout,).
    Computed as one matrix product against the patch (im2col) matrix.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_5d(x, "conv3d")
    if w.ndim != 5 or w.shape[1] != x.shape[1] or len(set(w.shape[2:])) != 1 or w.shape[2] % 2 == 0:
        raise ShapeMismatch(f"kernel {w.shape} incompatible with input {x.shape}")
    n, cin, d, h, wd = x.shape
    cout, k = w.shape[0], w.shape[2]
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    cols = _im2col(xp, k, d, h, wd)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, d, h, wd)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None, None]
        parents.append(b)

    def back(g):
        g2 = g.reshape(n, cout, d * h * wd)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, cin, k, k, k, d, h, wd)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, :, i:i + d, j:j + h, l:l + wd] += gcols[:, :, i, j, l]
            gx = gxp[:, :, p:p + d, p:p + h, p:p + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)
    return _make(out, parents, back)


def avgpool2(x) -> Tensor:
    """2x2x2 average pooling."""
    x = as_tensor(x)
    _check_5d(x, "avgpool2")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise OddSpatialDims(f"average pooling needs even spatial dims, got {x.shape[2:]}")
    out = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))

    def back(g):
        return (np.repeat(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3), 2, axis=4) / 8.0,)
    return _make(out, (x,), back)


def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbour upsampling by 2 along each spatial axis."""
    x = as_tensor(x)
    _check_5d(x, "upsample_nearest2")
    out = np.repeat(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), 2, axis=4)
    n, c, d, h, w = x.shape

    def back(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)
    return _make(out, (x,), back)


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over space, then scale and shift per channel."""
    x = as_tensor(x)
    _check_5d(x, "instance_norm")
    axes = (2, 3, 4)
    m = int(np.prod(x.shape[2:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv
    c = x.shape[1]
    gamma = np.ones(c) if weight is None else as_tensor(weight).data
    if gamma.shape != (c,):
        raise ShapeMismatch(f"instance-norm scale shape {gamma.shape} != ({c},)")
    out = xhat * gamma[None, :, None, None, None]
    if bias is not None:
        out = out + as_tensor(bias).data[None, :, None, None, None]
    parents = [x]
    if weight is not None:
        parents.append(as_tensor(weight))
    if bias is not None:
        parents.append(as_tensor(bias))

    def back(g):
        gh = g * gamma[None, :, None, None, None]
        gx = inv / m * (m * gh - gh.sum(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3, 4)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)
    return _make(out, parents, back)


def softmax_channels(x) -> Tensor:
    """Softmax over axis 1."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    return _make(y, (x,), back)


# -- gradient checking ------------------------------------------------------------------

def relative_error(analytic, numeric, scale=None, floor_frac: float = 1e-3) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor_frac * scale)``.

    ``scale`` defaults to the largest numeric magnitude.  The floor keeps
    entries whose true gradient is zero (or negligible next to the rest of
    the gradient) from turning finite-difference round-off into a 100% error.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = float(np.abs(n).max()) if scale is None else float(scale)
    floor = max(floor_frac * scale, 1e-12)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, h: float = 1e-6,
                     indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``x`` (modified in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                    h: float = 1e-6, max_entries: Optional[int] = None, seed: int = 0,
                    weights: Optional[np.ndarray] = None) -> float:
    """Max relative error between backprop and finite differences of ``sum(fn(inputs) * weights)``.

    ``weights`` (random by default) turn a tensor output into a scalar.  With
    ``max_entries`` only that many randomly chosen entries per input are probed.
    The error floor is anchored to the largest gradient entry over all inputs.
    """
    rng = np.random.default_rng(seed)
    out = fn(inputs)
    if weights is None:
        weights = rng.standard_normal(out.shape)

    def scalar():
        with no_grad():
            return float((fn(inputs).data * weights).sum())

    for t in inputs:
        t.zero_grad()
    (out * weights).sum().backward()
    pairs = []
    for t in inputs:
        if not t.requires_grad:
            continue
        size = t.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        num = numeric_gradient(scalar, t.data, h, idx).reshape(-1)[idx]
        ana = np.zeros(size)[idx] if t.grad is None else t.grad.reshape(-1)[idx]
        pairs.append((ana, num))
    if not pairs:
        return 0.0
    scale = max(float(np.abs(n).max(initial=0.0)) for _, n in pairs)
    return max(relative_error(a, n, scale) for a, n in pairs)
