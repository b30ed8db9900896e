"""Pixel-wise cross-entropy, Adam with decoupled weight decay, poly learning
rate decay and the epoch loop with checkpoint/resume."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AugmentConfig, Dataset, Sample, augment, prepare_batch
from .errors import ConfigError, DimensionError, NumericalError
from .model import SegmentationModel, load_model, save_model

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_COLUMNS = ("epoch", "mean_loss", "lr", "seconds")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 100
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    augment: bool = True
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1): {self.adam_beta1}, {self.adam_beta2}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.poly_power < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("poly_power and weight_decay must be >= 0 and adam_eps > 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int) -> "OptimState":
        m = {k[len("optim.m.") :]: a for k, a in arrays.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v.") :]: a for k, a in arrays.items() if k.startswith("optim.v.")}
        return cls(m, v, t)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    model: SegmentationModel
    log: list[EpochLog]
    state: OptimState


def cross_entropy(probs, mask) -> Tensor:
    """Mean over pixels of -log p(true class), probabilities floored at 1e-12."""
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))
    mask = np.asarray(mask)
    if probs.ndim != 4 or probs.shape[1] != 2 or probs.shape[0:1] + probs.shape[2:] != mask.shape:
        raise DimensionError(f"probabilities {probs.shape} do not match mask {mask.shape} as (B,2,H,W)/(B,H,W)")
    fg = mask.astype(probs.dtype)
    p_true = probs[:, 1] * fg + probs[:, 0] * (1 - fg)
    return -ag.log_floor(p_true, PROB_FLOOR).mean()


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    if total_steps <= 0 or step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update, in place; returns (params, state).

    Weight decay is decoupled (theta -= lr * wd * theta) unless
    ``config.decoupled_weight_decay`` is false, in which case wd * theta is
    added to the gradient.
    """
    b1, b2, eps, wd = config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        if not config.decoupled_weight_decay and wd:
            g = g + wd * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if config.decoupled_weight_decay and wd:
            update = update + wd * theta
        theta -= (lr * update).astype(theta.dtype)
    return params, state


def _as_samples(dataset) -> list[Sample]:
    return list(dataset.samples) if isinstance(dataset, Dataset) else list(dataset)


def write_log(path, rows: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r.epoch, repr(float(r.mean_loss)), repr(float(r.lr)), f"{r.seconds:.3f}"])


def read_log(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        return [
            EpochLog(int(r["epoch"]), float(r["mean_loss"]), float(r["lr"]), float(r["seconds"]))
            for r in csv.DictReader(fh)
        ]


def train(
    model: SegmentationModel,
    dataset,
    config: TrainConfig,
    *,
    out_dir=None,
    checkpoint_every: int = 0,
    resume_from=None,
) -> TrainResult:
    """Train ``model`` in place.

    Batches are drawn from a generator seeded by (seed, epoch), so a run
    resumed from an epoch checkpoint replays the same batches and
    augmentations as an uninterrupted one.  With ``out_dir`` set, writes
    ``train_log.csv``, ``final.ckpt`` and every ``checkpoint_every`` epochs
    ``epoch_XXXX.ckpt`` (model parameters plus optimizer moments).
    """
    config.validate()
    samples = _as_samples(dataset)
    if not samples:
        raise ValueError("training set is empty")
    n_batches = math.ceil(len(samples) / config.batch_size)
    total_steps = config.epochs * n_batches
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = OptimState()
    history: list[EpochLog] = []
    start_epoch = 1
    if resume_from is not None:
        loaded, extra, meta = load_model(resume_from, model.config)
        model.params.load_state(loaded.params.state())
        state = OptimState.from_arrays(extra, int(meta["step"]))
        history = [EpochLog(**row) for row in meta.get("history", [])]
        start_epoch = int(meta["epoch"]) + 1

    step = state.t
    params = model.params
    for epoch in range(start_epoch, config.epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(samples))
        losses, lr = [], 0.0
        for bi in range(n_batches):
            batch = [samples[i] for i in order[bi * config.batch_size : (bi + 1) * config.batch_size]]
            if config.augment:
                batch = [augment(s, rng, AugmentConfig()) for s in batch]
            pet, ct, mask = prepare_batch(batch, params.dtype)
            params.zero_grad()
            loss = cross_entropy(model.forward(pet, ct), mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step + 1}")
            loss.backward()
            lr = poly_lr(step, total_steps, config.lr0, config.poly_power)
            adam_step(params.state(), params.grads(), state, lr, config)
            step += 1
            losses.append(value)
        entry = EpochLog(epoch, float(np.mean(losses)), lr, time.perf_counter() - started)
        history.append(entry)
        log.info("epoch %d loss %.6f lr %.3g (%.2fs)", epoch, entry.mean_loss, lr, entry.seconds)
        if out is not None:
            write_log(out / "train_log.csv", history)
            if checkpoint_every and epoch % checkpoint_every == 0:
                _save(out / f"epoch_{epoch:04}.ckpt", model, state, epoch, history, config)

    if out is not None:
        _save(out / "final.ckpt", model, state, config.epochs, history, config)
    return TrainResult(model, history, state)


def _save(path, model, state: OptimState, epoch: int, history, config: TrainConfig) -> None:
    meta = {
        "epoch": epoch,
        "step": state.t,
        "train_config": config.to_dict(),
        "history": [asdict(h) for h in history],
    }
    save_model(path, model, extra=state.to_arrays(), meta=meta)
