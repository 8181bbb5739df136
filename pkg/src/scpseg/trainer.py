"""Deterministic training loop, evaluation runner, and run comparison.

Training follows a fixed recipe: Adam with coupled weight decay, learning
rate halved when the epoch counter passes each milestone fraction of the
total, shuffled batches from a seeded stream with the last partial batch
kept, and best-validation-Dice checkpoint selection. Given the same config
and seed, two runs produce bitwise-identical parameters and loss histories.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .backbone import BackboneConfig, ConfigError
from .heads import HeadVariant
from .metrics import Connectivity, LesionMetricsReport, TTestResult, dice, lesion_metrics, paired_ttest
from .model import ModelSpec, SegModel, build_model, model_forward
from .synthdata import DatasetSplits, Sample
from .tensor import Graph, Tensor, bce_with_logits, mul, reduce_sum, sigmoid

__all__ = [
    "LossKind",
    "TrainConfig",
    "AdamState",
    "TrainingError",
    "RunRecord",
    "adam_step",
    "loss_bce_dice",
    "learning_rate_at",
    "train",
    "evaluate",
    "compare_runs",
    "zero_grads",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite state."""


class LossKind(str, Enum):
    BCE_DICE = "bce_dice"
    BCE = "bce"
    DICE = "dice"


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig
    head_variant: HeadVariant = HeadVariant.BASE
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 14
    epochs: int = 90
    lr_milestones: tuple[float, ...] = (0.5, 0.7, 0.9)
    seed: int = 0
    loss: LossKind = LossKind.BCE_DICE
    phi_hidden: int = 64
    zero_init_phi_last: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        ms = self.lr_milestones
        if any(not (0.0 < m < 1.0) for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"lr_milestones must be strictly increasing in (0,1), got {ms}")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            head=self.head_variant,
            backbone=self.backbone,
            phi_hidden=self.phi_hidden,
            zero_init_phi_last=self.zero_init_phi_last,
        )


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            m={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
        )


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """Classic Adam with bias correction; weight decay is added to the gradient."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=np.float32)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {state.step}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - update.astype(p.data.dtype)


def loss_bce_dice(logits: Tensor, mask, kind: LossKind = LossKind.BCE_DICE) -> Tensor:
    """Mean binary cross-entropy plus (1 - soft Dice) with +1 smoothing."""
    target = np.asarray(mask, dtype=np.float32).reshape(logits.shape)
    parts = []
    if kind in (LossKind.BCE_DICE, LossKind.BCE):
        parts.append(mul(reduce_sum(bce_with_logits(logits, target)), 1.0 / logits.size))
    if kind in (LossKind.BCE_DICE, LossKind.DICE):
        probs = sigmoid(logits)
        inter = reduce_sum(mul(probs, Tensor(target)))
        soft = (2.0 * inter + 1.0) / (reduce_sum(probs) + float(target.sum()) + 1.0)
        parts.append(1.0 - soft)
    total = parts[0]
    for extra in parts[1:]:
        total = total + extra
    return total


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    halvings = sum(1 for m in cfg.lr_milestones if epoch >= m * cfg.epochs)
    return cfg.lr * 2.0**-halvings


@dataclass
class RunRecord:
    seed: int
    config: dict
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    test_report: LesionMetricsReport | None = None
    per_case: list[LesionMetricsReport] = field(default_factory=list)
    best_epoch: int = -1


def predict_mask(model: SegModel, sample: Sample, threshold: float = 0.5) -> np.ndarray:
    logits = model_forward(model, sample.image)
    probs = 1.0 / (1.0 + np.exp(-logits.data[0].astype(np.float64)))
    return (probs > threshold).astype(np.uint8)


def _mean_dice(model: SegModel, samples: list[Sample], threshold: float) -> float:
    return float(np.mean([dice(predict_mask(model, s, threshold), s.mask) for s in samples]))


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def train(cfg: TrainConfig, data: DatasetSplits, connectivity: Connectivity = Connectivity.EIGHT) -> tuple[RunRecord, SegModel]:
    """Train on ``data.train``, select by validation Dice, evaluate on ``data.test``."""
    spec = cfg.model_spec()
    sample0 = data.train[0]
    _, h, w = sample0.image.shape
    f = spec.backbone.pool_factor
    if h % f or w % f:
        raise ConfigError(f"dataset {h}x{w} incompatible with backbone depth {spec.backbone.depth}")
    if sample0.image.shape[0] != spec.backbone.in_channels:
        raise ConfigError(
            f"dataset has {sample0.image.shape[0]} channels, backbone expects {spec.backbone.in_channels}"
        )

    model = build_model(spec, seed=cfg.seed)
    params = model.named_parameters()
    state = AdamState.init(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    record = RunRecord(seed=cfg.seed, config=_config_echo(cfg))

    best_val = -1.0
    best_snap = _snapshot(params)
    n = len(data.train)
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            zero_grads(params)
            for idx in batch:
                sample = data.train[int(idx)]
                graph = Graph()
                logits = model_forward(model, sample.image, graph)
                loss = loss_bce_dice(logits, sample.mask, cfg.loss)
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, sample {int(idx)}")
                graph.backward(mul(loss, 1.0 / len(batch)))
                epoch_loss += val
            adam_step(params, state, lr, cfg.weight_decay)
        record.train_loss.append(epoch_loss / n)
        vd = _mean_dice(model, data.val, cfg.threshold)
        record.val_dice.append(vd)
        if vd > best_val:
            best_val = vd
            best_snap = _snapshot(params)
            record.best_epoch = epoch
        log.info("epoch %d: loss %.4f, val dice %.4f, lr %.2e", epoch, record.train_loss[-1], vd, lr)

    _restore(params, best_snap)
    record.per_case, record.test_report = evaluate(model, data.test, connectivity, cfg.threshold)
    return record, model


def evaluate(
    model: SegModel,
    samples: list[Sample],
    connectivity: Connectivity = Connectivity.EIGHT,
    threshold: float = 0.5,
    ldice_doubled: bool = False,
) -> tuple[list[LesionMetricsReport], LesionMetricsReport]:
    """Per-case reports plus an aggregate whose ratio fields are per-case means
    and whose count fields are totals."""
    reports = [
        lesion_metrics(predict_mask(model, s, threshold), s.mask, connectivity, ldice_doubled)
        for s in samples
    ]
    agg = LesionMetricsReport(
        dice=float(np.mean([r.dice for r in reports])),
        l_dice=float(np.mean([r.l_dice for r in reports])),
        l_tpr=float(np.mean([r.l_tpr for r in reports])),
        l_ppv=float(np.mean([r.l_ppv for r in reports])),
        l_f1=float(np.mean([r.l_f1 for r in reports])),
        tpr_count=sum(r.tpr_count for r in reports),
        gl_count=sum(r.gl_count for r in reports),
        pl_count=sum(r.pl_count for r in reports),
        tpr_pred_count=sum(r.tpr_pred_count for r in reports),
    )
    return reports, agg


def compare_runs(records_a: list[RunRecord], records_b: list[RunRecord]) -> tuple[TTestResult, TTestResult]:
    """Paired t-tests on per-case Dice and L-Dice, averaging each case across runs."""

    def case_matrix(records: list[RunRecord], attr: str) -> np.ndarray:
        rows = [[getattr(r, attr) for r in rec.per_case] for rec in records]
        lengths = {len(row) for row in rows}
        if len(lengths) != 1:
            raise ConfigError(f"runs disagree on test-case count: {sorted(lengths)}")
        return np.asarray(rows).mean(axis=0)

    dice_a, dice_b = case_matrix(records_a, "dice"), case_matrix(records_b, "dice")
    ld_a, ld_b = case_matrix(records_a, "l_dice"), case_matrix(records_b, "l_dice")
    if dice_a.shape != dice_b.shape:
        raise ConfigError(f"case sets misaligned: {dice_a.shape} vs {dice_b.shape}")
    return paired_ttest(dice_a, dice_b), paired_ttest(ld_a, ld_b)


def _config_echo(cfg: TrainConfig) -> dict:
    return {
        "head": cfg.head_variant.value,
        "in_channels": cfg.backbone.in_channels,
        "n_c": cfg.backbone.n_c,
        "depth": cfg.backbone.depth,
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "lr_milestones": list(cfg.lr_milestones),
        "seed": cfg.seed,
        "loss": cfg.loss.value,
        "phi_hidden": cfg.phi_hidden,
        "zero_init_phi_last": cfg.zero_init_phi_last,
        "threshold": cfg.threshold,
    }
