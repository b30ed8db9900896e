"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its output, its parent tensors and a closure
that maps the output gradient to one gradient per parent.  ``Tensor.backward``
walks the graph in reverse topological order and accumulates gradients into
leaves created with ``requires_grad=True``.

Fused ops (convolution, normalizations, softmax, GELU, resize) carry
hand-written backward passes.  ``FAULTS`` lets a test scale the gradient a
named op emits, which is how the gradient-check suite proves it can fail.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError

# op name -> multiplicative factor applied to the gradients that op emits
FAULTS: dict[str, float] = {}


def _faulted(name: str, grads):
    factor = FAULTS.get(name)
    if factor is None:
        return grads
    return tuple(None if g is None else g * factor for g in grads)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward) -> Tensor:
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _node(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log_floor(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); the gradient is zero where the floor is active."""
    clipped = np.maximum(a.data, floor)
    out = np.log(clipped)

    def backward(g):
        return (np.where(a.data > floor, g / clipped, 0.0).astype(a.dtype),)

    return _node(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, 0).astype(a.dtype)
    return _node(out, (a,), lambda g: _faulted("relu", (g * positive,)))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(a.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return _faulted("gelu", ((g * (cdf + x * pdf)).astype(a.dtype),))

    return _node(out, (a,), backward)


# shape ----------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _node(out, (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(out, (a,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tuple(tensors), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _faulted("matmul", (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)))

    return _node(out, (a, b), backward)


def _padding(pad) -> tuple[int, int, int, int]:
    if isinstance(pad, int):
        return pad, pad, pad, pad
    top, bottom, left, right = pad
    return top, bottom, left, right


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad=0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw) weights.

    ``pad`` is either one int for all sides or (top, bottom, left, right).
    The padded extent minus the kernel must divide evenly by the stride.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weights, got {x.shape} and {weight.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, weights expect {wcin}")
    top, bottom, left, right = _padding(pad)
    hp, wp = h + top + bottom, w + left + right
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise DimensionError(
            f"conv2d output size is not integral: ({hp}-{kh})/{stride}, ({wp}-{kw})/{stride}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    padded = any((top, bottom, left, right))
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))) if padded else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, top : top + h, left : left + w]
        return _faulted("conv2d", (gx, gw, gb))

    if bias is None:
        return _node(out, (x, weight), lambda g: backward(g)[:2])
    return _node(out, (x, weight, bias), backward)


# normalization / probability ------------------------------------------------


def _standardize_backward(gxhat, xhat, inv_std, axes):
    n = int(np.prod([xhat.shape[a] for a in axes]))
    s1 = gxhat.sum(axis=axes, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
    return inv_std * (gxhat - s1 / n - xhat * s2 / n)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = _standardize_backward(g * gamma.data, xhat, inv_std, (-1,))
        return _faulted("layer_norm", (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)))

    return _node(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization of (B, C, H, W) over channel groups and space."""
    b, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"{c} channels cannot be split into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(b, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        gxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(b, groups, -1)
        gx = _standardize_backward(gxhat, xhat.reshape(b, groups, -1), inv_std, (-1,))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        return _faulted("group_norm", (gx.reshape(b, c, h, w), ggamma, g.sum(axis=(0, 2, 3))))

    return _node(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return _faulted("softmax", (out * (g - (g * out).sum(axis=axis, keepdims=True)),))

    return _node(out, (x,), backward)


# resampling -----------------------------------------------------------------


ALIGNMENTS = ("corners", "centers", "origin")


def interpolation_matrix(src: int, dst: int, dtype=np.float64, align: str = "corners") -> np.ndarray:
    """(dst, src) matrix of linear interpolation weights.

    ``align`` fixes where source sample j sits on the target axis:
    "corners" stretches so both end samples coincide; "centers" treats
    samples as pixel centers; "origin" puts sample j at j * dst/src, the
    position a stride-(dst/src) convolution read it from.  Positions beyond
    the source range are clamped.
    """
    if align not in ALIGNMENTS:
        raise ValueError(f"align must be one of {ALIGNMENTS}, got {align!r}")
    m = np.zeros((dst, src), dtype=dtype)
    if dst == 1 or src == 1:
        m[:, 0] = 1.0
        return m
    i = np.arange(dst)
    if align == "corners":
        pos = i * ((src - 1) / (dst - 1))
    elif align == "centers":
        pos = (i + 0.5) * (src / dst) - 0.5
    else:
        pos = i * (src / dst)
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[i, lo] = 1.0 - frac
    m[i, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, target_h: int, target_w: int, align: str = "corners") -> Tensor:
    """Bilinear resize of the last two axes."""
    h, w = x.shape[-2:]
    if (h, w) == (target_h, target_w):
        return x
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"target size must be positive, got {target_h}x{target_w}")
    if (h < 2 and target_h != h) or (w < 2 and target_w != w):
        raise DimensionError(f"cannot resize a {h}x{w} map; each resized axis needs >= 2 samples")
    ry = interpolation_matrix(h, target_h, x.dtype, align)
    rx = interpolation_matrix(w, target_w, x.dtype, align)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return _faulted("bilinear_resize", (np.matmul(np.matmul(ry.T, g), rx),))

    return _node(out, (x,), backward)
