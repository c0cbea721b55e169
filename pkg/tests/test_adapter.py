import pytest
import torch

from helpers import randomize_projections
from promptus.adapter import (
    FrozenParameterDrift,
    MissingProjections,
    check_frozen,
    finetune_adapter,
    freeze_for_adapter,
    train_scratch_baseline,
    zero_shot_eval,
)
from promptus.checkpoint import state_digest
from promptus.data import Batch, EpochPlan, generate_synthetic_dataset
from promptus.model import build_model, count_parameters, toy_config
from promptus.prompts import Task
from promptus.training import DataOptions, SampleStore, TrainConfig, evaluate_records, train


@pytest.fixture
def store():
    return SampleStore(DataOptions(image_size=64, augment=False))


def test_freeze_leaves_only_projections(toy_model):
    model, ts = freeze_for_adapter(toy_model)
    assert len(ts.trainable) == 12
    assert all(name.startswith("projection.") for name in ts.trainable)
    assert ts.count(model) == count_parameters(model)["projection_only"]
    assert sum(param.numel() for param in model.parameters() if param.requires_grad) == ts.count(model)


def test_freeze_requires_projections():
    with pytest.raises(MissingProjections):
        freeze_for_adapter(build_model(toy_config(prompt_enabled=False), 0))


def test_five_steps_move_only_projections(synth_small, store):
    _, records = synth_small
    model, ts = freeze_for_adapter(build_model(toy_config(), 0))
    before = {key: value.clone() for key, value in model.state_dict().items()}
    seg = [record for record in records if record.has_mask]
    cls = [record for record in records if record.has_label]
    plan = EpochPlan([Batch(seg[index:index + 2], Task.SEGMENTATION) for index in (0, 2, 4)]
                     + [Batch(cls[index:index + 2], Task.CLASSIFICATION) for index in (0, 2)])
    _, hist = train(model, [plan], TrainConfig(epochs=1), store)
    assert hist.steps == 5
    after = model.state_dict()
    frozen_delta = max((after[name] - before[name]).abs().max().item() for name in ts.frozen)
    assert frozen_delta == 0.0
    assert any(not torch.equal(after[name], before[name]) for name in ts.trainable)


def test_check_frozen_detects_drift(toy_model):
    model, ts = freeze_for_adapter(toy_model)
    snap = {name: param.detach().clone() for name, param in model.named_parameters() if name in ts.frozen}
    with torch.no_grad():
        model.encoder.norm.weight.add_(1e-3)
    with pytest.raises(FrozenParameterDrift):
        check_frozen(model, snap)


@pytest.fixture(scope="module")
def indis_records(tmp_path_factory):
    out = tmp_path_factory.mktemp("indis")
    return generate_synthetic_dataset(
        {"positions": {"lung": 14}, "image_size": 64, "seed": 4, "dataset_id": "newsite",
         "natures": {"lung": "tumor"}}, out)


def test_adapter_on_unseen_position(indis_records, store):
    base = build_model(toy_config(), 0)
    digest = state_digest(base)
    model, report, hist = finetune_adapter(base, indis_records, store, TrainConfig(batch_size=4), epochs=2)
    assert len(hist.epochs) == 2
    assert report.metadata["base_digest"] == digest
    assert report.parameters["trainable"] == count_parameters(model)["projection_only"]
    assert {task for _, task in report.keys()} <= {"seg", "cls"}


def test_zero_shot_is_read_only(indis_records, store):
    model = build_model(toy_config(), 0)
    randomize_projections(model, 1)
    digest = state_digest(model)
    report = zero_shot_eval(model, indis_records, store)
    assert state_digest(model) == digest == report.metadata["digest"]
    direct = evaluate_records(model, indis_records, store)
    assert {key: report.value(*key) for key in direct} == direct


def test_scratch_baseline(indis_records, store):
    reports = []
    for _ in range(2):
        model, report, _ = train_scratch_baseline(toy_config(), indis_records, store,
                                                  TrainConfig(epochs=1, batch_size=4, seed=2))
        assert report.parameters["trainable"] == report.parameters["total"]
        reports.append(report.to_dict())
    assert reports[0] == reports[1]
    assert {row["task"] for row in reports[0]["rows"]} == {"seg", "cls"}
