"""Central finite-difference verification of every differentiable op.

Each case builds a float64 scalar objective from random inputs, runs the
analytic backward pass once, then perturbs sampled entries of every checked
tensor by +/- ``step``.  The error of an entry is

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)

so an entry passes when its relative error is below 1e-4, or its absolute
error below 1e-7 for near-zero gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .model import (
    ModelConfig,
    backbone_forward,
    build_variant,
    init_backbone,
    init_head,
    segmentation_head,
)
from .nn import ParamStore

STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    op: str
    seed: int
    max_error: float
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < REL_TOL


def entry_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR / REL_TOL)
    return np.abs(analytic - numeric) / scale


def check_gradients(
    objective: Callable[[], Tensor],
    tensors: list[Tensor],
    rng: np.random.Generator,
    max_entries: int | None = 40,
    fraction: float | None = None,
    step: float = STEP,
) -> tuple[float, int]:
    """Compare backward() against central differences on sampled entries.

    Returns (max entry error, number of entries checked).
    """
    for t in tensors:
        t.grad = None
    objective().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst, count = 0.0, 0
    for t, grad in zip(tensors, analytic):
        size = t.data.size
        if fraction is not None:
            k = max(1, int(round(fraction * size)))
        else:
            k = size if max_entries is None else min(size, max_entries)
        picks = rng.choice(size, size=k, replace=False) if k < size else np.arange(size)
        flat = t.data.reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = float(objective().data)
            flat[i] = orig - step
            down = float(objective().data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = float(entry_error(np.array(grad.reshape(-1)[i]), np.array(numeric)))
            worst = max(worst, err)
            count += 1
    return worst, count


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projector(rng, out: Tensor) -> np.ndarray:
    return rng.normal(size=out.shape)


def _store(rng) -> ParamStore:
    return ParamStore(np.float64)


def _randomize(store: ParamStore, rng, scale=0.5) -> None:
    """Move norm/bias parameters off their neutral init so they are exercised."""
    for name, t in store.items():
        if name.endswith(("gamma", "beta", ".b")):
            t.data = t.data + rng.normal(0.0, scale, size=t.shape)


def _projected(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    weights = _projector(rng, fn())
    return lambda: (fn() * weights).sum()


# individual cases -----------------------------------------------------------


def case_conv2d(rng):
    x = _leaf(rng, 2, 3, 7, 7)
    w = _leaf(rng, 4, 3, 3, 3)
    b = _leaf(rng, 4)
    stride, pad = (1, 1) if rng.random() < 0.5 else (2, 1)
    return _projected(lambda: ag.conv2d(x, w, b, stride, pad), rng), [x, w, b]


def case_residual_block(rng):
    store = _store(rng)
    stride = 2
    nn.init_residual_block(store.scope("rb"), 3, 4, stride, rng)
    _randomize(store, rng)
    x = _leaf(rng, 2, 3, 8, 8)
    obj = lambda: nn.residual_block(x, store.scope("rb"), stride).mean()
    return obj, [x] + [t for _, t in store.items()]


def case_residual_block_identity(rng):
    store = _store(rng)
    nn.init_residual_block(store.scope("rb"), 3, 3, 1, rng)
    _randomize(store, rng)
    x = _leaf(rng, 1, 3, 6, 6)
    obj = _projected(lambda: nn.residual_block(x, store.scope("rb"), 1), rng)
    return obj, [x] + [t for _, t in store.items()]


def case_group_norm(rng):
    x = _leaf(rng, 2, 4, 3, 3)
    g = _leaf(rng, 4)
    b = _leaf(rng, 4)
    return _projected(lambda: ag.group_norm(x, g, b, 2), rng), [x, g, b]


def case_layer_norm(rng):
    x = _leaf(rng, 5, 6)
    g = _leaf(rng, 6)
    b = _leaf(rng, 6)
    return _projected(lambda: ag.layer_norm(x, g, b, nn.LN_EPS), rng), [x, g, b]


def case_softmax(rng):
    x = _leaf(rng, 4, 5, scale=2.0)
    return _projected(lambda: ag.softmax(x, axis=-1), rng), [x]


def case_gelu(rng):
    x = _leaf(rng, 3, 7, scale=2.0)
    return _projected(lambda: ag.gelu(x), rng), [x]


def case_bilinear_resize(rng):
    x = _leaf(rng, 2, 3, 4, 5)
    return _projected(lambda: ag.bilinear_resize(x, 7, 9), rng), [x]


def case_msa(rng):
    store = _store(rng)
    nn.init_msa(store.scope("attn"), 8, rng)
    _randomize(store, rng)
    x = _leaf(rng, 2, 5, 8)
    obj = _projected(lambda: nn.msa(x, store.scope("attn"), 2), rng)
    return obj, [x] + [t for _, t in store.items()]


def case_mlp_block(rng):
    store = _store(rng)
    nn.init_mlp(store.scope("mlp"), 6, rng)
    _randomize(store, rng)
    x = _leaf(rng, 4, 6)
    obj = _projected(lambda: nn.mlp_block(x, store.scope("mlp")), rng)
    return obj, [x] + [t for _, t in store.items()]


def case_transformer_module(rng):
    store = _store(rng)
    nn.init_transformer_module(store.scope("tm"), 8, rng)
    _randomize(store, rng)
    x = _leaf(rng, 4, 8)
    obj = _projected(lambda: nn.transformer_module(x, store.scope("tm"), 2), rng)
    return obj, [x] + [t for _, t in store.items()]


def case_backbone(rng):
    store = _store(rng)
    init_backbone(store.scope("bb"), 1, (2, 3, 4, 5), rng)
    _randomize(store, rng)
    x = _leaf(rng, 1, 1, 16, 16)
    wd = wsk = None

    def obj():
        nonlocal wd, wsk
        deep, skip = backbone_forward(x, store.scope("bb"))
        if wd is None:
            wd, wsk = rng.normal(size=deep.shape), rng.normal(size=skip.shape)
        return (deep * wd).sum() + (skip * wsk).sum()

    obj()
    return obj, [x] + [t for _, t in store.items()]


def case_segmentation_head(rng):
    cfg = ModelConfig(h=32, w=32, d_embed=8, depth=1, n_heads=2, backbone_widths=(2, 3, 4, 5))
    store = _store(rng)
    init_head(store.scope("head"), cfg.d_embed, 3, rng)
    _randomize(store, rng)
    tokens = _leaf(rng, 1, cfg.n_tokens, cfg.d_embed)
    skip = _leaf(rng, 1, 3, 8, 8)
    obj = _projected(lambda: segmentation_head(tokens, skip, store.scope("head"), cfg), rng)
    return obj, [tokens, skip] + [t for _, t in store.items()]


TINY_HCT = ModelConfig(h=32, w=32, d_embed=16, depth=1, n_heads=2, backbone_widths=(2, 2, 4, 4), variant="HCT")


def case_hct_end_to_end(rng):
    """Pixel cross-entropy of the tiny HCT; checks 1% of all parameters."""
    from .training import cross_entropy

    model = build_variant(TINY_HCT, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _randomize(model.params, rng, scale=0.1)
    pet = rng.random((1, 1, 32, 32))
    ct = rng.random((1, 1, 32, 32))
    mask = (rng.random((1, 32, 32)) < 0.3).astype(np.uint8)
    obj = lambda: cross_entropy(model.forward(pet, ct), mask)
    return obj, [t for _, t in model.params.items()]


CASES: dict[str, tuple[Callable, dict]] = {
    "conv2d": (case_conv2d, {}),
    "residual_block": (case_residual_block, {}),
    "residual_block_identity": (case_residual_block_identity, {}),
    "group_norm": (case_group_norm, {}),
    "layer_norm": (case_layer_norm, {}),
    "softmax": (case_softmax, {}),
    "gelu": (case_gelu, {}),
    "bilinear_resize": (case_bilinear_resize, {}),
    "msa": (case_msa, {}),
    "mlp_block": (case_mlp_block, {}),
    "transformer_module": (case_transformer_module, {}),
    "backbone": (case_backbone, {"max_entries": 6}),
    "segmentation_head": (case_segmentation_head, {"max_entries": 10}),
    "hct_end_to_end": (case_hct_end_to_end, {"fraction": 0.01, "max_entries": None}),
}


def run_case(name: str, seed: int) -> CheckResult:
    build, opts = CASES[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    objective, tensors = build(rng)
    worst, count = check_gradients(objective, tensors, rng, **opts)
    return CheckResult(name, seed, worst, count, time.perf_counter() - start)


def run_suite(seeds=DEFAULT_SEEDS, ops=None) -> list[CheckResult]:
    names = list(CASES) if ops is None else list(ops)
    return [run_case(name, seed) for name in names for seed in seeds]
