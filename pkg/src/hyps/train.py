"""Training engine: Adam with decoupled weight decay, poly schedule,
augmentation, and output averaging over the last epoch snapshots."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .errors import ConfigError, DivergenceError, UsageError
from .linalg import make_rng

log = logging.getLogger(__name__)

N_AVERAGED_SNAPSHOTS = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    total_iters: int | None = None
    seed: int = 42
    augment: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.lr0) and self.lr0 > 0):
            raise ConfigError(f"lr0 must be a positive finite number, got {self.lr0}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class ParamPartition:
    trainable: frozenset[str]
    frozen: frozenset[str]

    def __post_init__(self):
        overlap = self.trainable & self.frozen
        if overlap:
            raise ConfigError(f"parameters both trainable and frozen: {sorted(overlap)[:5]}")

    @classmethod
    def from_model(cls, model) -> "ParamPartition":
        params = model.parameters()
        return cls(
            frozenset(k for k, p in params.items() if p.trainable),
            frozenset(k for k, p in params.items() if not p.trainable),
        )

    @classmethod
    def frozen_all(cls, model) -> "ParamPartition":
        return cls(frozenset(), frozenset(model.parameters()))

    def check(self, names) -> None:
        names = set(names)
        union = self.trainable | self.frozen
        if union != names:
            extra = sorted(union - names)[:3]
            missing = sorted(names - union)[:3]
            raise ConfigError(f"partition does not match the model (unknown {extra}, uncovered {missing})")


def poly_lr(it: int, lr0: float, total_iters: int, power: float = 0.9) -> float:
    """lr0 * (1 - it / total_iters) ** power."""
    if total_iters <= 0:
        return lr0
    if not 0 <= it <= total_iters:
        raise ConfigError(f"iteration {it} outside [0, {total_iters}]")
    return lr0 * (1.0 - it / total_iters) ** power


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update with decoupled weight decay.

    Only parameters that are present in ``grads`` *and* flagged trainable are
    touched; their values are replaced by new arrays, never written in place.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        p = params[name]
        if not p.trainable:
            continue
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = p.value - lr * (update + weight_decay * p.value)
    return state


@dataclass(frozen=True)
class AugmentParams:
    flips: tuple[bool, bool, bool] = (False, False, False)
    shift: float = 0.0
    zoom: float = 1.0


def draw_augment(rng: np.random.Generator) -> AugmentParams:
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    shift = float(rng.uniform(-0.1, 0.1))
    zoom = float(rng.uniform(0.9, 1.1))
    return AugmentParams(flips, shift, zoom)


def _zoom_about_centre(vol: np.ndarray, factor: float, order: int) -> np.ndarray:
    centre = (np.array(vol.shape) - 1) / 2.0
    matrix = np.diag(np.full(3, 1.0 / factor))
    offset = centre - matrix @ centre
    return ndimage.affine_transform(vol, matrix, offset=offset, order=order, mode="nearest")


def apply_augment(image, label, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64)
    lab = np.asarray(label)
    if img.shape != lab.shape:
        raise ConfigError(f"image {img.shape} and label {lab.shape} differ in shape")
    for axis, flip in enumerate(params.flips):
        if flip:
            img = np.flip(img, axis)
            lab = np.flip(lab, axis)
    if params.shift != 0.0:
        img = img + params.shift
    if params.zoom != 1.0:
        img = _zoom_about_centre(img, params.zoom, order=1)
        lab = _zoom_about_centre(lab.astype(np.float64), params.zoom, order=0).astype(lab.dtype)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def augment(image, label, rng: np.random.Generator):
    """Random flips per axis (p=0.5), a global intensity shift in [-0.1, 0.1]
    and a zoom in [0.9, 1.1] resampled onto the original grid."""
    return apply_augment(image, label, draw_augment(rng))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    batch_loss: float


@dataclass
class TrainResult:
    model: object
    history: list[EpochRecord]
    snapshots: list[dict[str, np.ndarray]]

    def history_csv(self) -> str:
        lines = ["epoch,lr,loss,batch_loss"]
        lines += [f"{r.epoch},{r.lr:.10e},{r.loss:.12e},{r.batch_loss:.12e}" for r in self.history]
        return "\n".join(lines) + "\n"


def dataset_loss(model, dataset: Sequence[tuple[np.ndarray, np.ndarray]], batch_size: int = 4) -> float:
    """Mean Dice loss over the un-augmented samples (no gradients)."""
    total, n = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        x = np.stack([c[0] for c in chunk])
        y = np.stack([c[1] for c in chunk]).astype(np.float64)
        tape = Tape(grad_enabled=False)
        total += float(ad.dice_loss(model.forward(tape, x), y).value) * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


def train(
    model,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    partition: ParamPartition,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the Dice loss; trains ``model`` in place.

    The recorded per-epoch ``loss`` is the Dice loss over the un-augmented
    training set after the epoch, so it only moves when parameters move.
    """
    params = model.parameters()
    partition.check(params)
    for name, p in params.items():
        p.trainable = name in partition.trainable
    if config.epochs and not dataset:
        raise UsageError("cannot train on an empty dataset")

    rng = make_rng(config.seed)
    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size) if n else 0
    total_iters = config.total_iters or config.epochs * per_epoch
    state = AdamState()
    history: list[EpochRecord] = []
    snapshots: list[dict[str, np.ndarray]] = []
    it = 0
    has_trainable = bool(partition.trainable)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        lr = poly_lr(min(it, total_iters), config.lr0, total_iters)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xs, ys = [], []
            for i in idx:
                img, lab = dataset[i]
                if config.augment:
                    img, lab = augment(img, lab, rng)
                xs.append(img)
                ys.append(lab)
            x = np.stack(xs)
            y = np.stack(ys).astype(np.float64)
            tape = Tape(grad_enabled=has_trainable)
            loss = ad.dice_loss(model.forward(tape, x), y)
            lval = float(loss.value)
            if not math.isfinite(lval):
                raise DivergenceError(epoch)
            batch_losses.append(lval)
            lr = poly_lr(min(it, total_iters), config.lr0, total_iters)
            if has_trainable:
                grads = tape.backward(loss)
                adam_step(params, grads, state, lr, config.weight_decay)
            it += 1
        eloss = dataset_loss(model, dataset, config.batch_size)
        if not math.isfinite(eloss):
            raise DivergenceError(epoch)
        rec = EpochRecord(epoch, lr, eloss, float(np.mean(batch_losses)) if batch_losses else eloss)
        history.append(rec)
        log.info("epoch=%d lr=%.6g loss=%.6f", rec.epoch, rec.lr, rec.loss)
        if on_epoch is not None:
            on_epoch(rec)
        if epoch > config.epochs - N_AVERAGED_SNAPSHOTS:
            snapshots.append(model.state())
    return TrainResult(model=model, history=history, snapshots=snapshots)


def checkpoint_output_average(models: Sequence, volume) -> np.ndarray:
    """Voxelwise mean of the probability volumes of exactly four snapshots."""
    from .model import sliding_window_infer

    if len(models) != N_AVERAGED_SNAPSHOTS:
        raise UsageError(f"expected {N_AVERAGED_SNAPSHOTS} snapshots, got {len(models)}")
    acc = None
    for m in models:
        out = sliding_window_infer(m, volume)
        acc = out if acc is None else acc + out
    return acc / N_AVERAGED_SNAPSHOTS


def snapshot_models(model, snapshots: list[dict[str, np.ndarray]]) -> list:
    """Materialise state snapshots as independent model copies."""
    out = []
    for s in snapshots:
        m = model.copy()
        m.load_state(s)
        out.append(m)
    return out
