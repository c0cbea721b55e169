"""Losses, metrics, the curriculum training loop and evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as functional

from promptus.data import (
    AugmentConfig,
    EpochPlan,
    ManifestRecord,
    apply_augment,
    balance_by_position,
    build_epoch_plan,
    materialize,
    sample_augment_params,
)
from promptus.model import PromptedUSNet, ShapeMismatch
from promptus.prompts import InputType, Task, prompt_from_record

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int, record_ids: Sequence[str]):
        self.epoch, self.batch, self.record_ids = epoch, batch, list(record_ids)
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (records {', '.join(record_ids)})")


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    ce_weight: float = 0.4
    dice_weight: float = 0.6

    def __post_init__(self):
        if self.ce_weight < 0 or self.dice_weight < 0 or not math.isclose(self.ce_weight + self.dice_weight, 1.0):
            raise ValueError("loss weights must be nonnegative and sum to 1")


# --------------------------------------------------------------------------
# losses


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Smoothed soft Dice loss; batched inputs (B, H, W) are averaged per sample."""
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    target = target.to(probs.dtype)
    if probs.dim() <= 2:
        probs, target = probs.unsqueeze(0), target.unsqueeze(0)
    flat_probs = probs.flatten(1)
    flat_target = target.flatten(1)
    dice = (2.0 * (flat_probs * flat_target).sum(1) + smooth) / (flat_probs.sum(1) + flat_target.sum(1) + smooth)
    return (1.0 - dice).mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean softmax NLL; logits (B, C) with target (B,) or (B, C, H, W) with target (B, H, W)."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        target = torch.as_tensor(target).reshape(1)
    if logits.shape[:1] + logits.shape[2:] != target.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    return functional.cross_entropy(logits, target.long())


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``ce_weight * CE + dice_weight * Dice`` on the softmax foreground channel."""
    ce = cross_entropy_loss(logits, target)
    if weights.dice_weight == 0:
        return weights.ce_weight * ce
    fg = logits.softmax(dim=1)[:, 1]
    return weights.ce_weight * ce + weights.dice_weight * dice_loss(fg, target)


# --------------------------------------------------------------------------
# metrics


def dice_coefficient(pred, target) -> float:
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    denom = int(pred.sum()) + int(target.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, target).sum()) / denom


def accuracy(predictions, labels) -> float:
    """Fraction of matches; 2-D ``predictions`` are treated as logits and argmaxed."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels).reshape(-1)
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    predictions = predictions.reshape(-1)
    if len(predictions) != len(labels) or len(labels) == 0:
        raise LengthMismatch(f"LengthMismatch({len(predictions)} predictions, {len(labels)} labels)")
    return float((predictions == labels).mean())


# --------------------------------------------------------------------------
# sample loading


@dataclass
class DataOptions:
    image_size: int = 64
    local_margin: float = 0.2
    location_gain: float = 1.3
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    balance: bool = True
    variants: bool = False


class SampleStore:
    """In-memory cache of materialized (image, mask) pairs keyed by record id."""

    def __init__(self, opts: DataOptions):
        self.opts = opts
        self._cache: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}

    def get(self, record: ManifestRecord) -> tuple[np.ndarray, np.ndarray | None]:
        if record.record_id not in self._cache:
            self._cache[record.record_id] = materialize(
                record, self.opts.image_size, self.opts.local_margin, self.opts.location_gain
            )
        return self._cache[record.record_id]


def collate(
    store: SampleStore, refs: Sequence[ManifestRecord], task: Task, rng: np.random.Generator | None = None
):
    images, masks, labels, prompts = [], [], [], []
    for record in refs:
        image, mask = store.get(record)
        if rng is not None:
            image, mask = apply_augment(image, mask, sample_augment_params(rng, store.opts.augmentation))
        images.append(image)
        if task is Task.SEGMENTATION:
            masks.append(mask)
        else:
            labels.append(record.class_label)
        prompts.append(prompt_from_record(record, task, InputType(record.input_type)))
    images = torch.from_numpy(np.stack(images)).unsqueeze(1)
    if task is Task.SEGMENTATION:
        targets = torch.from_numpy(np.stack(masks).astype(np.int64))
    else:
        targets = torch.tensor(labels, dtype=torch.int64)
    return images, targets, prompts


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 200
    batch_size: int = 8
    weight_decay: float = 1e-4
    seed: int = 0
    prompt_enabled: bool = True
    cosine_schedule: bool = False
    eval_every: int = 1
    grad_clip: float | None = 1.0
    # stop as soon as these train metrics are met (None disables)
    target_train_dice: float | None = None
    target_train_accuracy: float | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)


@dataclass
class EpochRecord:
    epoch: int
    seg_loss: float
    cls_loss: float
    steps: int
    val_dice: float | None = None
    val_accuracy: float | None = None
    train_dice: float | None = None
    train_accuracy: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    best_state: dict | None = field(default=None, repr=False)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return sum(epoch.steps for epoch in self.epochs)

    def loss_sequence(self) -> list[tuple[float, float]]:
        return [(epoch.seg_loss, epoch.cls_loss) for epoch in self.epochs]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for epoch in self.epochs:
                fh.write(json.dumps(asdict(epoch)) + "\n")


def _selection_score(dice: float | None, acc: float | None) -> float | None:
    vals = [value for value in (dice, acc) if value is not None]
    return sum(vals) / len(vals) if vals else None


@torch.no_grad()
def evaluate_records(model: PromptedUSNet, records: Sequence[ManifestRecord], store: SampleStore,
                     batch_size: int = 16) -> dict[tuple[str, str], float]:
    """Per-(dataset_id, task) mean Dice / accuracy, without augmentation."""
    was_training = model.training
    model.eval()
    dice: dict[str, list[float]] = {}
    hits: dict[str, list[int]] = {}
    try:
        for task, pool in ((Task.SEGMENTATION, [record for record in records if record.has_mask]),
                           (Task.CLASSIFICATION, [record for record in records if record.has_label])):
            for start in range(0, len(pool), batch_size):
                refs = pool[start:start + batch_size]
                images, targets, prompts = collate(store, refs, task)
                out = model(images.to(_dtype(model)), prompts)
                if task is Task.SEGMENTATION:
                    pred = out.seg_logits.argmax(1).numpy()
                    for record, predicted, truth in zip(refs, pred, targets.numpy()):
                        dice.setdefault(record.dataset_id, []).append(dice_coefficient(predicted, truth))
                else:
                    pred = out.cls_logits.argmax(1).numpy()
                    for record, predicted, truth in zip(refs, pred, targets.numpy()):
                        hits.setdefault(record.dataset_id, []).append(int(predicted == truth))
    finally:
        model.train(was_training)
    rows = {(dataset_id, "seg"): float(np.mean(value)) for dataset_id, value in dice.items()}
    rows.update({(dataset_id, "cls"): float(np.mean(value)) for dataset_id, value in hits.items()})
    return dict(sorted(rows.items()))


def _dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _mean_metric(rows: dict, task: str) -> float | None:
    vals = [value for (dataset_id, kind), value in rows.items() if kind == task]
    return float(np.mean(vals)) if vals else None


def epoch_plans(train_records: Sequence[ManifestRecord], cfg: TrainConfig, opts: DataOptions):
    """Yield one fresh (balanced, curriculum-ordered) plan per epoch."""
    for epoch in range(cfg.epochs):
        seed = cfg.seed * 100003 + epoch
        refs = balance_by_position(train_records, seed) if opts.balance else list(train_records)
        yield build_epoch_plan(refs, cfg.batch_size, seed)


def train(
    model: PromptedUSNet,
    plans: Iterable[EpochPlan],
    cfg: TrainConfig,
    store: SampleStore,
    val_records: Sequence[ManifestRecord] = (),
    train_eval_records: Sequence[ManifestRecord] = (),
    on_best: Callable[[PromptedUSNet, EpochRecord], None] | None = None,
) -> tuple[PromptedUSNet, TrainHistory]:
    """AdamW over the curriculum plans; only parameters with ``requires_grad`` move."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [param for param in model.parameters() if param.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs) if cfg.cosine_schedule else None
    dtype = _dtype(model)
    history = TrainHistory()
    model.train()
    for epoch, plan in enumerate(plans, start=1):
        losses = {Task.SEGMENTATION: [], Task.CLASSIFICATION: []}
        steps = 0
        for step, batch in enumerate(plan):
            images, targets, prompts = collate(store, batch.refs, batch.task, rng if store.opts.augment else None)
            out = model(images.to(dtype), prompts)
            if batch.task is Task.SEGMENTATION:
                loss = segmentation_loss(out.seg_logits, targets, cfg.loss_weights)
            else:
                loss = cross_entropy_loss(out.cls_logits, targets)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(epoch, step, [record.record_id for record in batch.refs])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            steps += 1
            losses[batch.task].append(loss.item())
        if sched is not None:
            sched.step()
        rec = EpochRecord(
            epoch=epoch,
            seg_loss=float(np.mean(losses[Task.SEGMENTATION])) if losses[Task.SEGMENTATION] else float("nan"),
            cls_loss=float(np.mean(losses[Task.CLASSIFICATION])) if losses[Task.CLASSIFICATION] else float("nan"),
            steps=steps,
        )
        last = epoch == cfg.epochs
        if (epoch % cfg.eval_every == 0 or last) and val_records:
            rows = evaluate_records(model, val_records, store)
            rec.val_dice, rec.val_accuracy = _mean_metric(rows, "seg"), _mean_metric(rows, "cls")
            score = _selection_score(rec.val_dice, rec.val_accuracy)
            if score is not None and (history.best_score is None or score > history.best_score):
                history.best_score, history.best_epoch = score, epoch
                history.best_state = copy.deepcopy(model.state_dict())
                if on_best is not None:
                    on_best(model, rec)
        done = False
        if (epoch % cfg.eval_every == 0 or last) and train_eval_records:
            rows = evaluate_records(model, train_eval_records, store)
            rec.train_dice, rec.train_accuracy = _mean_metric(rows, "seg"), _mean_metric(rows, "cls")
            done = _targets_met(cfg, rec)
        history.epochs.append(rec)
        logger.info("epoch %d seg %.4f cls %.4f val dice %s acc %s", epoch, rec.seg_loss, rec.cls_loss,
                    rec.val_dice, rec.val_accuracy)
        if done:
            break
    return model, history


def _targets_met(cfg: TrainConfig, rec: EpochRecord) -> bool:
    checks = []
    if cfg.target_train_dice is not None:
        checks.append(rec.train_dice is not None and rec.train_dice >= cfg.target_train_dice)
    if cfg.target_train_accuracy is not None:
        checks.append(rec.train_accuracy is not None and rec.train_accuracy >= cfg.target_train_accuracy)
    return bool(checks) and all(checks)


def fit(
    model: PromptedUSNet,
    train_records: Sequence[ManifestRecord],
    val_records: Sequence[ManifestRecord],
    cfg: TrainConfig,
    store: SampleStore,
    restore_best: bool = True,
    on_best: Callable[[PromptedUSNet, EpochRecord], None] | None = None,
) -> tuple[PromptedUSNet, TrainHistory]:
    """Train on fresh per-epoch plans, then reload the best-validation weights."""
    model, history = train(model, epoch_plans(train_records, cfg, store.opts), cfg, store,
                           val_records=val_records, on_best=on_best)
    if restore_best and history.best_state is not None:
        model.load_state_dict(history.best_state)
    return model, history
