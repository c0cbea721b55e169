"""Adapter fine-tuning: freeze the encoder-decoder and train only the prompt projections.

Also hosts the two baselines this protocol is compared against, zero-shot
transfer and training from scratch on the new dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from promptus.checkpoint import state_digest
from promptus.data import DEFAULT_RATIOS, ManifestRecord, select_partition, split_by_patient
from promptus.model import ModelConfig, PromptedUSNet, build_model, count_parameters
from promptus.reporting import RunReport, report_from_metrics
from promptus.training import SampleStore, TrainConfig, TrainHistory, evaluate_records, fit

ADAPTER_EPOCHS = 50


class MissingProjections(ValueError):
    pass


class FrozenParameterDrift(AssertionError):
    pass


@dataclass(frozen=True)
class TrainableSet:
    trainable: frozenset[str]
    frozen: frozenset[str]

    def count(self, model: PromptedUSNet) -> int:
        return sum(param.numel() for name, param in model.named_parameters() if name in self.trainable)


def freeze_for_adapter(model: PromptedUSNet) -> tuple[PromptedUSNet, TrainableSet]:
    if model.projection is None:
        raise MissingProjections("checkpoint has no prompt projections (built with prompt_enabled = false)")
    trainable, frozen = set(), set()
    for name, param in model.named_parameters():
        is_proj = name.startswith("projection.")
        param.requires_grad_(is_proj)
        (trainable if is_proj else frozen).add(name)
    return model, TrainableSet(frozenset(trainable), frozenset(frozen))


def unfreeze_all(model: PromptedUSNet) -> TrainableSet:
    names = set()
    for name, param in model.named_parameters():
        param.requires_grad_(True)
        names.add(name)
    return TrainableSet(frozenset(names), frozenset())


def _snapshot(model: PromptedUSNet, names) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    return {name: params[name].detach().clone() for name in names}


def check_frozen(model: PromptedUSNet, snapshot: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    drifted = [name for name, before in snapshot.items() if not torch.equal(params[name].detach(), before)]
    if drifted:
        raise FrozenParameterDrift(f"{len(drifted)} frozen parameters changed, e.g. {drifted[0]}")


def _split(records, ratios, seed):
    assignment = split_by_patient(records, ratios, seed)
    return tuple(select_partition(records, assignment, part) for part in ("train", "val", "test"))


def finetune_adapter(
    model: PromptedUSNet,
    records: Sequence[ManifestRecord],
    store: SampleStore,
    cfg: TrainConfig | None = None,
    epochs: int = ADAPTER_EPOCHS,
    ratios=DEFAULT_RATIOS,
) -> tuple[PromptedUSNet, RunReport, TrainHistory]:
    """Fine-tune the projections on a patient-split new dataset and report on its test split."""
    cfg = replace(cfg or TrainConfig(), epochs=epochs)
    base_digest = state_digest(model)
    model, ts = freeze_for_adapter(model)
    snapshot = _snapshot(model, ts.frozen)
    train_recs, val_recs, test_recs = _split(records, ratios, cfg.seed)
    model, history = fit(model, train_recs, val_recs, cfg, store)
    check_frozen(model, snapshot)
    report = report_from_metrics(
        evaluate_records(model, test_recs, store),
        parameters={**count_parameters(model), "trainable": ts.count(model)},
        metadata={"protocol": "adapter", "base_digest": base_digest, "epochs": epochs,
                  "seed": cfg.seed, "trainable": sorted(ts.trainable)},
    )
    return model, report, history


def zero_shot_eval(model: PromptedUSNet, records: Sequence[ManifestRecord], store: SampleStore,
                   label: str = "zeroshot") -> RunReport:
    """Evaluate without any parameter update; the state digest is checked before and after."""
    before = state_digest(model)
    metrics = evaluate_records(model, records, store)
    after = state_digest(model)
    if before != after:
        raise FrozenParameterDrift("zero-shot evaluation modified the model")
    return report_from_metrics(metrics, parameters=count_parameters(model),
                               metadata={"protocol": label, "digest": before})


def train_scratch_baseline(
    config: ModelConfig,
    records: Sequence[ManifestRecord],
    store: SampleStore,
    cfg: TrainConfig | None = None,
    ratios=DEFAULT_RATIOS,
) -> tuple[PromptedUSNet, RunReport, TrainHistory]:
    """Fresh model, every parameter trainable, trained and tested on the new dataset only."""
    cfg = cfg or TrainConfig()
    model = build_model(config, seed=cfg.seed)
    ts = unfreeze_all(model)
    train_recs, val_recs, test_recs = _split(records, ratios, cfg.seed)
    model, history = fit(model, train_recs, val_recs, cfg, store)
    report = report_from_metrics(
        evaluate_records(model, test_recs, store),
        parameters={**count_parameters(model), "trainable": ts.count(model)},
        metadata={"protocol": "scratch", "epochs": cfg.epochs, "seed": cfg.seed},
    )
    return model, report, history
