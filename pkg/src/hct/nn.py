"""Differentiable building blocks: parameter storage, convolutional and
transformer layers, token reshaping and initializers.

Layers are plain functions taking a :class:`Scope` (a prefixed view into a
:class:`ParamStore`) so that one store can hold a whole model while each
block only sees its own names.
"""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

LN_EPS = 1e-6
POS_SIGMA = 0.02
# Convs that feed a GroupNorm are scale-invariant, so their init scale does not
# change the function, only Adam's relative step size (~ lr / |w|).  A quarter
# of the He scale lets the backbone keep pace with the transformer at lr 1e-4.
NORMED_CONV_GAIN = 0.25


class ParamStore:
    """Ordered mapping of unique parameter names to trainable tensors."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient buffers, zero-filled for parameters the last backward did not reach."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise DimensionError(
                f"parameter names disagree: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for name, t in self._params.items():
            value = np.asarray(arrays[name])
            if value.shape != t.shape:
                raise DimensionError(f"{name}: expected shape {t.shape}, got {value.shape}")
            t.data = value.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self._params.items():
            out.add(name, t.data)
        return out


class Scope:
    """Prefixed view of a ParamStore: ``scope["w"]`` reads ``prefix.w``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self.store

    def add(self, name: str, value: np.ndarray) -> Tensor:
        return self.store.add(self._full(name), value)

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._full(name))


# initialization -------------------------------------------------------------


def trunc_normal_init(n_tokens: int, dim: int, sigma: float = POS_SIGMA, rng=None) -> np.ndarray:
    """N(0, sigma^2) samples truncated to [-2 sigma, 2 sigma] by rejection."""
    if n_tokens < 1 or dim < 1:
        raise DimensionError(f"table needs positive dims, got ({n_tokens}, {dim})")
    rng = np.random.default_rng(rng)
    out = rng.normal(0.0, sigma, size=(n_tokens, dim))
    bad = np.abs(out) > 2 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2 * sigma
    return out


def init_conv(scope: Scope, cin: int, cout: int, k: int, rng, bias: bool = True, gain: float = 1.0) -> None:
    """He-normal weights (times ``gain``), zero bias."""
    std = gain * math.sqrt(2.0 / (cin * k * k))
    scope.add("w", rng.normal(0.0, std, size=(cout, cin, k, k)))
    if bias:
        scope.add("b", np.zeros(cout))


def init_linear(scope: Scope, din: int, dout: int, rng) -> None:
    limit = math.sqrt(6.0 / (din + dout))
    scope.add("w", rng.uniform(-limit, limit, size=(din, dout)))
    scope.add("b", np.zeros(dout))


def init_norm(scope: Scope, dim: int) -> None:
    scope.add("gamma", np.ones(dim))
    scope.add("beta", np.zeros(dim))


def norm_groups(channels: int, max_groups: int = 4) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


# convolutional blocks -------------------------------------------------------


def conv(x: Tensor, scope: Scope, stride: int = 1, pad=0) -> Tensor:
    b = scope["b"] if "b" in scope else None
    return ag.conv2d(x, scope["w"], b, stride=stride, pad=pad)


def same_pad(k: int, stride: int):
    """Padding that maps H to H/stride for odd ``k`` and even H.

    With stride 2 the extra row/column goes on the top/left side, which
    reproduces symmetric padding with floor division.
    """
    p = k // 2
    if stride == 1:
        return p
    return (p, p - 1, p, p - 1)


def group_norm(x: Tensor, scope: Scope) -> Tensor:
    return ag.group_norm(x, scope["gamma"], scope["beta"], norm_groups(x.shape[1]))


def init_residual_block(scope: Scope, cin: int, cout: int, stride: int, rng) -> None:
    init_conv(scope.scope("conv1"), cin, cout, 3, rng, bias=False, gain=NORMED_CONV_GAIN)
    init_norm(scope.scope("norm1"), cout)
    init_conv(scope.scope("conv2"), cout, cout, 3, rng, bias=False, gain=NORMED_CONV_GAIN)
    init_norm(scope.scope("norm2"), cout)
    if stride != 1 or cin != cout:
        init_conv(scope.scope("shortcut"), cin, cout, 1, rng, bias=False)


def residual_block(x: Tensor, scope: Scope, stride: int = 1) -> Tensor:
    """relu(F(x) + shortcut(x)) with F = conv3x3/s, norm, relu, conv3x3, norm."""
    if stride not in (1, 2):
        raise DimensionError(f"residual block stride must be 1 or 2, got {stride}")
    f = conv(x, scope.scope("conv1"), stride=stride, pad=same_pad(3, stride))
    f = ag.relu(group_norm(f, scope.scope("norm1")))
    f = conv(f, scope.scope("conv2"), pad=1)
    f = group_norm(f, scope.scope("norm2"))
    if "shortcut.w" in scope:
        s = x[:, :, ::stride, ::stride] if stride != 1 else x
        s = conv(s, scope.scope("shortcut"))
    else:
        s = x
    if f.shape != s.shape:
        raise DimensionError(f"residual branch {f.shape} does not match shortcut {s.shape}")
    return ag.relu(f + s)


# token ops ------------------------------------------------------------------


def layer_norm(x: Tensor, scope: Scope, eps: float = LN_EPS) -> Tensor:
    return ag.layer_norm(x, scope["gamma"], scope["beta"], eps)


def linear(x: Tensor, scope: Scope) -> Tensor:
    return x @ scope["w"] + scope["b"]


def softmax(x, axis: int = -1):
    """Stable softmax; accepts a Tensor or a plain array (returns the same kind)."""
    if isinstance(x, Tensor):
        return ag.softmax(x, axis)
    return ag.softmax(Tensor(np.asarray(x, dtype=float)), axis).data


def init_msa(scope: Scope, dim: int, rng) -> None:
    for name in ("q", "k", "v", "out"):
        init_linear(scope.scope(name), dim, dim, rng)


def msa(x: Tensor, scope: Scope, n_heads: int, record: list | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, N, D) tokens.

    When ``record`` is a list, each call appends its (B, heads, N, N)
    attention weights to it.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    b, n, d = x.shape
    if d % n_heads:
        raise ConfigError(f"embedding dim {d} is not divisible by {n_heads} heads")
    hd = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n, n_heads, hd).transpose(0, 2, 1, 3)

    q = heads(linear(x, scope.scope("q")))
    k = heads(linear(x, scope.scope("k")))
    v = heads(linear(x, scope.scope("v")))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    attn = ag.softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = linear(ctx, scope.scope("out"))
    return out.reshape(n, d) if squeeze else out


def init_mlp(scope: Scope, dim: int, rng, ratio: int = 4) -> None:
    init_linear(scope.scope("fc1"), dim, ratio * dim, rng)
    init_linear(scope.scope("fc2"), ratio * dim, dim, rng)


def mlp_block(x: Tensor, scope: Scope) -> Tensor:
    return linear(ag.gelu(linear(x, scope.scope("fc1"))), scope.scope("fc2"))


def init_transformer_module(scope: Scope, dim: int, rng) -> None:
    init_norm(scope.scope("ln1"), dim)
    init_msa(scope.scope("attn"), dim, rng)
    init_norm(scope.scope("ln2"), dim)
    init_mlp(scope.scope("mlp"), dim, rng)


def transformer_module(x: Tensor, scope: Scope, n_heads: int, record: list | None = None) -> Tensor:
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.))."""
    x = x + msa(layer_norm(x, scope.scope("ln1")), scope.scope("attn"), n_heads, record)
    return x + mlp_block(layer_norm(x, scope.scope("ln2")), scope.scope("mlp"))


def transformer_stack(x: Tensor, scope: Scope, depth: int, n_heads: int, record=None) -> Tensor:
    for i in range(depth):
        x = transformer_module(x, scope.scope(f"layer{i}"), n_heads, record)
    return x


def init_transformer_stack(scope: Scope, depth: int, dim: int, rng) -> None:
    for i in range(depth):
        init_transformer_module(scope.scope(f"layer{i}"), dim, rng)


def bilinear_resize(x, target_h: int, target_w: int, align: str = "corners"):
    """Bilinear resize of the trailing two axes (Tensor or array)."""
    if isinstance(x, Tensor):
        return ag.bilinear_resize(x, target_h, target_w, align)
    return ag.bilinear_resize(Tensor(np.asarray(x)), target_h, target_w, align).data


def flatten_to_tokens(fmap: Tensor) -> Tensor:
    """(D, h, w) -> (h*w, D) or (B, D, h, w) -> (B, h*w, D), row-major cells."""
    if fmap.ndim == 3:
        d, h, w = fmap.shape
        return fmap.reshape(d, h * w).transpose(1, 0)
    if fmap.ndim == 4:
        b, d, h, w = fmap.shape
        return fmap.reshape(b, d, h * w).transpose(0, 2, 1)
    raise DimensionError(f"expected a (D,h,w) or (B,D,h,w) map, got {fmap.shape}")


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`flatten_to_tokens`."""
    n = tokens.shape[-2]
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot fill a {h}x{w} map")
    if tokens.ndim == 2:
        return tokens.transpose(1, 0).reshape(tokens.shape[1], h, w)
    b, _, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, d, h, w)
