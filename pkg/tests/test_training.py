import json
import math

import pytest
import torch

from promptus.data import Batch, EpochPlan
from promptus.model import build_model, toy_config
from promptus.prompts import Task
from promptus.training import (
    DataOptions,
    LossWeights,
    NonFiniteLoss,
    SampleStore,
    TrainConfig,
    evaluate_records,
    fit,
    train,
)


@pytest.fixture
def store():
    return SampleStore(DataOptions(image_size=64, augment=False))


def _two_batch_plan(records):
    seg = [record for record in records if record.has_mask][:2]
    cls = [record for record in records if record.has_label][:2]
    return EpochPlan([Batch(seg, Task.SEGMENTATION), Batch(cls, Task.CLASSIFICATION)])


def test_one_epoch_takes_one_step_per_batch(synth_small, store):
    _, records = synth_small
    model, hist = train(build_model(toy_config(), 0), [_two_batch_plan(records)], TrainConfig(epochs=1), store)
    assert hist.steps == 2 and len(hist.epochs) == 1
    assert all(math.isfinite(value) for value in hist.loss_sequence()[0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        LossWeights(0.5, 0.6)
    assert TrainConfig(loss_weights={"ce_weight": 0.3, "dice_weight": 0.7}).loss_weights.ce_weight == 0.3


def test_same_seed_is_bitwise_reproducible(synth_small):
    _, records = synth_small
    runs = []
    for _ in range(2):
        st = SampleStore(DataOptions(image_size=64, augment=True))
        cfg = TrainConfig(epochs=2, batch_size=4, seed=9)
        model, hist = fit(build_model(toy_config(), 9), records[:12], [], cfg, st)
        runs.append((hist.loss_sequence(), model.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(runs[0][1][key], runs[1][1][key]) for key in runs[0][1])


def test_non_finite_loss_names_the_batch(synth_small, store):
    _, records = synth_small
    model = build_model(toy_config(), 0)
    with torch.no_grad():
        model.decoder.seg.head.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as info:
        train(model, [_two_batch_plan(records)], TrainConfig(epochs=1), store)
    assert info.value.epoch == 1 and info.value.batch == 0 and len(info.value.record_ids) == 2


def test_frozen_parameters_do_not_move(synth_small, store):
    _, records = synth_small
    model = build_model(toy_config(), 0)
    for param in model.encoder.parameters():
        param.requires_grad_(False)
    before = {key: value.clone() for key, value in model.encoder.state_dict().items()}
    train(model, [_two_batch_plan(records)], TrainConfig(epochs=1), store)
    assert all(torch.equal(before[key], value) for key, value in model.encoder.state_dict().items())


def test_validation_selects_and_restores_best(synth_small, store, tmp_path):
    _, records = synth_small
    cfg = TrainConfig(epochs=3, batch_size=8, seed=1)
    model, hist = fit(build_model(toy_config(), 1), records[:16], records[16:], cfg, store)
    assert hist.best_epoch in (1, 2, 3)
    assert all(epoch.val_dice is not None for epoch in hist.epochs)
    assert all(torch.equal(model.state_dict()[key], value) for key, value in hist.best_state.items())
    hist.write_jsonl(tmp_path / "h.jsonl")
    lines = [json.loads(line) for line in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert [line["epoch"] for line in lines] == [1, 2, 3]


def test_evaluate_records_keys(synth_small, store):
    _, records = synth_small
    rows = evaluate_records(build_model(toy_config(), 0), records, store)
    assert set(rows) == {("toyset", "seg"), ("toyset", "cls")}
    assert all(0.0 <= value <= 1.0 for value in rows.values())
