"""Pretrain / fine-tune / evaluate loops shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterSpec, Variant, trainable_params
from .errors import UndefinedMetricError
from .metrics import dice_score, filter_small_components, hd95
from .model import (
    ToyModelConfig,
    ToySegModel,
    attach_adapters,
    build_model,
    closed_form_trainable,
    layer_inventory,
    sliding_window_infer,
)
from .synth import SynthTask, generate_dataset, task_a, task_b
from .train import (
    N_AVERAGED_SNAPSHOTS,
    ParamPartition,
    TrainConfig,
    TrainResult,
    checkpoint_output_average,
    snapshot_models,
    train,
)

log = logging.getLogger(__name__)

SWEEP_VARIANTS = ("lora", "seqlora", "pissa", "cps", "hyps")
SWEEP_RANKS = (2, 4, 8, 16, 32)
PRETRAIN_LR = 3e-3


@dataclass
class CaseScore:
    index: int
    dice: float
    hd95: float  # nan when either mask is empty
    pred_voxels: int
    true_voxels: int


@dataclass
class EvalSummary:
    cases: list[CaseScore] = field(default_factory=list)

    @property
    def dice(self) -> float:
        return float(np.mean([c.dice for c in self.cases]))

    @property
    def hd95(self) -> float:
        vals = [c.hd95 for c in self.cases if not math.isnan(c.hd95)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def hd95_undefined(self) -> int:
        return sum(math.isnan(c.hd95) for c in self.cases)


def predict_volume(models: list[ToySegModel], image) -> np.ndarray:
    if len(models) == N_AVERAGED_SNAPSHOTS:
        return checkpoint_output_average(models, image)
    return sliding_window_infer(models[-1], image)


def evaluate(models: list[ToySegModel] | ToySegModel, dataset, min_component: int = 0) -> EvalSummary:
    """Threshold at 0.5, optionally drop small components, score each case."""
    if isinstance(models, ToySegModel):
        models = [models]
    out = EvalSummary()
    for i, (img, lab) in enumerate(dataset):
        pred = predict_volume(models, img) > 0.5
        if min_component > 0:
            pred = filter_small_components(pred, min_component).voxels
        truth = np.asarray(lab).astype(bool)
        d = dice_score(pred, truth)
        try:
            h = hd95(pred, truth)
        except UndefinedMetricError:
            h = float("nan")
        out.cases.append(CaseScore(i, d, h, int(pred.sum()), int(truth.sum())))
    return out


def pretrain(
    config: ToyModelConfig | None = None,
    task: SynthTask | None = None,
    n: int = 200,
    epochs: int = 20,
    seed: int = 42,
    lr0: float = PRETRAIN_LR,
) -> tuple[ToySegModel, TrainResult]:
    """Train every parameter of a fresh model on task A."""
    config = config or ToyModelConfig()
    task = task or task_a(seed=seed)
    model = build_model(config, seed)
    data = generate_dataset(task, n)
    result = train(model, data, ParamPartition.from_model(model), TrainConfig(epochs=epochs, lr0=lr0, seed=seed))
    return model, result


@dataclass
class FinetuneResult:
    model: ToySegModel
    partition: ParamPartition
    train: TrainResult
    summary: EvalSummary
    trainable: int

    def averaged_models(self) -> list[ToySegModel]:
        if len(self.train.snapshots) == N_AVERAGED_SNAPSHOTS:
            return snapshot_models(self.model, self.train.snapshots)
        return [self.model]


def finetune(
    base: ToySegModel,
    spec: AdapterSpec,
    train_set,
    test_set,
    config: TrainConfig,
    min_component: int = 0,
) -> FinetuneResult:
    model, partition = attach_adapters(base, spec, config.seed)
    result = train(model, train_set, partition, config)
    models = snapshot_models(model, result.snapshots) if len(result.snapshots) == N_AVERAGED_SNAPSHOTS else [model]
    summary = evaluate(models, test_set, min_component)
    return FinetuneResult(model, partition, result, summary, model.count_trainable())


def task_b_split(train_n: int, test_n: int, seed: int, side: int = 16):
    """Disjoint train / held-out draws from task B (different seeds)."""
    train_set = generate_dataset(task_b(seed=seed * 1000 + 1, side=side), train_n)
    test_set = generate_dataset(task_b(seed=seed * 1000 + 2, side=side), test_n)
    return train_set, test_set


@dataclass
class SweepRow:
    variant: str
    rank: int
    dice: float
    hd95: float
    adapter_params: int
    trainable_params: int
    enumerated_params: int


def rank_sweep(
    base: ToySegModel,
    train_set,
    test_set,
    config: TrainConfig,
    variants=SWEEP_VARIANTS,
    ranks=SWEEP_RANKS,
) -> list[SweepRow]:
    rows = []
    inventory = layer_inventory(base.config)
    for v in variants:
        for r in ranks:
            spec = AdapterSpec(Variant.parse(v), r)
            res = finetune(base, spec, train_set, test_set, config)
            rows.append(
                SweepRow(
                    variant=spec.variant.value,
                    rank=r,
                    dice=res.summary.dice,
                    hd95=res.summary.hd95,
                    adapter_params=trainable_params(inventory, spec),
                    trainable_params=closed_form_trainable(base.config, spec),
                    enumerated_params=res.trainable,
                )
            )
            log.info("sweep %s r=%d dice=%.2f", v, r, rows[-1].dice)
    return rows

