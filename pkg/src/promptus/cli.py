"""Command-line entrypoint: one mode per invocation, all artifacts under one run directory.

Run directory layout (fixed names)::

    config.echo        resolved configuration, re-runnable as --config
    checkpoints/       model.pt for the training modes
    history.jsonl      one line per epoch
    report.json        RunReport of the evaluated split
    embeddings.csv     export-embeddings output
    comparison.txt     report mode (plus comparison.json)
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import filelock
import yaml

from promptus.adapter import (
    ADAPTER_EPOCHS,
    FrozenParameterDrift,
    MissingProjections,
    finetune_adapter,
    freeze_for_adapter,
    train_scratch_baseline,
    zero_shot_eval,
)
from promptus.checkpoint import load_checkpoint, save_checkpoint
from promptus.data import (
    AugmentConfig,
    DataError,
    derive_input_variants,
    generate_synthetic_dataset,
    read_manifest,
    read_splits,
    select_partition,
    split_by_patient,
    write_splits,
)
from promptus.model import ModelConfig, build_model, count_parameters, toy_config
from promptus.reporting import (
    RunReport,
    comparison_data,
    export_embeddings,
    render_comparison,
    report_from_metrics,
    write_embeddings,
)
from promptus.training import DataOptions, NonFiniteLoss, SampleStore, TrainConfig, evaluate_records, fit

log = logging.getLogger("promptus")

MODES = ("synth", "prepare", "train", "eval", "zeroshot", "finetune-adapter", "scratch", "export-embeddings", "report")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

DEFAULTS = {
    "mode": None,
    "seed": 0,
    "model": {"preset": "toy"},
    "train": {},
    "data": {
        "manifests": [],
        "splits": None,
        "ratios": [0.7, 0.1, 0.2],
        "augment": True,
        "balance": True,
        "variants": False,
        "local_margin": 0.2,
        "location_gain": 1.3,
        "augmentation": {},
        "synth": None,
    },
    "checkpoint": None,
    "partition": None,
    "adapter": {"epochs": ADAPTER_EPOCHS},
    "reports": [],
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in place; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not KEY=VALUE")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key!r}: {exc}") from exc


def resolve_config(path: str | None, overrides=(), mode: str | None = None, seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if mode is not None:
        cfg["mode"] = mode
    if seed is not None:
        cfg["seed"] = seed
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {cfg['mode']!r}")
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def config_digest(cfg: dict) -> str:
    body = {key: value for key, value in cfg.items() if key != "seed"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def run_dir_name(cfg: dict) -> str:
    return f"{cfg['mode']}-{config_digest(cfg)[:12]}-seed{cfg['seed']}"


def model_config(cfg: dict) -> ModelConfig:
    spec = dict(cfg["model"])
    preset = spec.pop("preset", "toy")
    spec.setdefault("prompt_enabled", train_config(cfg).prompt_enabled)
    try:
        if preset == "toy":
            return toy_config(**spec)
        if preset == "default":
            return ModelConfig(**spec)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc
    raise ConfigError(f"model.preset must be 'toy' or 'default', got {preset!r}")


def train_config(cfg: dict) -> TrainConfig:
    spec = dict(cfg["train"])
    spec["seed"] = cfg["seed"]
    known = {spec_field.name for spec_field in fields(TrainConfig)}
    if set(spec) - known:
        raise ConfigError(f"train: unknown keys {sorted(set(spec) - known)}")
    return TrainConfig(**spec)


def data_options(cfg: dict, image_size: int) -> DataOptions:
    data = cfg["data"]
    try:
        aug = data["augmentation"] or {}
        if "crop_area" in aug:
            aug = {**aug, "crop_area": tuple(aug["crop_area"])}
        return DataOptions(
            image_size=image_size,
            local_margin=float(data["local_margin"]),
            location_gain=float(data["location_gain"]),
            augment=bool(data["augment"]),
            augmentation=AugmentConfig(**aug),
            balance=bool(data["balance"]),
            variants=bool(data["variants"]),
        )
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from exc


# --------------------------------------------------------------------------
# data plumbing


def _manifest_paths(cfg: dict) -> list[Path]:
    paths = cfg["data"]["manifests"]
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise ConfigError("data.manifests is empty")
    missing = [path for path in paths if not Path(path).is_file()]
    if missing:
        raise DataError(f"manifest not found: {', '.join(map(str, missing))}")
    return [Path(path) for path in paths]


def load_records(cfg: dict):
    records = [record for path in _manifest_paths(cfg) for record in read_manifest(path)]
    ids = [record.record_id for record in records]
    if len(set(ids)) != len(ids):
        raise DataError("record_id collides across manifests")
    return records


def assignment_for(cfg: dict, records) -> dict[str, str]:
    if cfg["data"]["splits"]:
        path = Path(cfg["data"]["splits"])
        if not path.is_file():
            raise DataError(f"splits file not found: {path}")
        return read_splits(path)
    return split_by_patient(records, tuple(cfg["data"]["ratios"]), cfg["seed"])


def _partitions(cfg, records):
    assignment = assignment_for(cfg, records)
    return {part: select_partition(records, assignment, part) for part in ("train", "val", "test")}


def _with_variants(records, opts: DataOptions):
    if not opts.variants:
        return list(records)
    return [variant for record in records for variant in derive_input_variants(record)]


def _require_checkpoint(cfg: dict):
    path = cfg["checkpoint"]
    if not path:
        raise ConfigError("this mode needs 'checkpoint'")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# --------------------------------------------------------------------------
# modes


def mode_synth(cfg, run_dir: Path) -> None:
    spec = cfg["data"]["synth"]
    if not spec:
        raise ConfigError("synth mode needs data.synth")
    spec = {"seed": cfg["seed"], **spec}
    records = generate_synthetic_dataset(spec, run_dir / "data")
    log.info("wrote %d records to %s", len(records), run_dir / "data" / "manifest.jsonl")


def mode_prepare(cfg, run_dir: Path) -> None:
    # manifests and splits only; pixels are never opened here
    records = load_records(cfg)
    assignment = assignment_for(cfg, records)
    write_splits(assignment, run_dir / "splits.jsonl")
    counts = {}
    for record in records:
        per_dataset = counts.setdefault(record.dataset_id, {})
        tally = per_dataset.setdefault(assignment[record.record_id], {"records": 0, "patients": set()})
        tally["records"] += 1
        tally["patients"].add(record.patient_id)
    summary = {
        dataset_id: {part: {"records": tally["records"], "patients": len(tally["patients"])}
                     for part, tally in parts.items()}
        for dataset_id, parts in sorted(counts.items())
    }
    (run_dir / "split_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _finish_training(model, history, report, run_dir: Path, cfg, provenance: dict) -> None:
    save_checkpoint(model, run_dir / "checkpoints" / "model.pt", provenance=provenance)
    history.write_jsonl(run_dir / "history.jsonl")
    report.metadata.update({"config_digest": config_digest(cfg), "seed": cfg["seed"]})
    report.save(run_dir / "report.json")


def mode_train(cfg, run_dir: Path) -> None:
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    opts = data_options(cfg, mcfg.image_size)
    parts = _partitions(cfg, load_records(cfg))
    store = SampleStore(opts)
    model = build_model(mcfg, seed=tcfg.seed)
    model, history = fit(model, _with_variants(parts["train"], opts), parts["val"], tcfg, store)
    report = report_from_metrics(evaluate_records(model, parts["test"], store),
                                 parameters=count_parameters(model),
                                 metadata={"protocol": "train", "best_epoch": history.best_epoch})
    _finish_training(model, history, report, run_dir, cfg, {"mode": "train"})


def mode_scratch(cfg, run_dir: Path) -> None:
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    opts = data_options(cfg, mcfg.image_size)
    store = SampleStore(opts)
    model, report, history = train_scratch_baseline(mcfg, load_records(cfg), store, tcfg,
                                                    tuple(cfg["data"]["ratios"]))
    _finish_training(model, history, report, run_dir, cfg, {"mode": "scratch"})


def mode_finetune(cfg, run_dir: Path) -> None:
    model, archive = _require_checkpoint(cfg)
    freeze_for_adapter(model)  # fail fast, before reading any data
    tcfg = train_config(cfg)
    store = SampleStore(data_options(cfg, model.config.image_size))
    epochs = int(cfg["adapter"].get("epochs", ADAPTER_EPOCHS))
    model, report, history = finetune_adapter(model, load_records(cfg), store, tcfg, epochs,
                                              tuple(cfg["data"]["ratios"]))
    provenance = {"mode": "finetune-adapter", "base_checkpoint": str(cfg["checkpoint"]),
                  "base_digest": archive["digest"], "trainable": report.metadata["trainable"]}
    _finish_training(model, history, report, run_dir, cfg, provenance)


def mode_eval(cfg, run_dir: Path) -> None:
    model, archive = _require_checkpoint(cfg)
    records = load_records(cfg)
    part = cfg["partition"] or "test"
    if part != "all":
        records = _partitions(cfg, records)[part]
    store = SampleStore(data_options(cfg, model.config.image_size))
    report = report_from_metrics(evaluate_records(model, records, store), parameters=count_parameters(model),
                                 metadata={"protocol": "eval", "partition": part, "checkpoint_digest": archive["digest"],
                                           "config_digest": config_digest(cfg), "seed": cfg["seed"]})
    report.save(run_dir / "report.json")


def mode_zeroshot(cfg, run_dir: Path) -> None:
    model, _ = _require_checkpoint(cfg)
    records = load_records(cfg)
    part = cfg["partition"] or "all"
    if part != "all":
        records = _partitions(cfg, records)[part]
    report = zero_shot_eval(model, records, SampleStore(data_options(cfg, model.config.image_size)))
    report.metadata.update({"partition": part, "config_digest": config_digest(cfg), "seed": cfg["seed"]})
    report.save(run_dir / "report.json")


def mode_export(cfg, run_dir: Path) -> None:
    model, _ = _require_checkpoint(cfg)
    records = load_records(cfg)
    part = cfg["partition"] or "all"
    if part != "all":
        records = _partitions(cfg, records)[part]
    rows = export_embeddings(model, records, SampleStore(data_options(cfg, model.config.image_size)))
    write_embeddings(rows, run_dir / "embeddings.csv")


def mode_report(cfg, run_dir: Path) -> None:
    entries = cfg["reports"]
    if not entries:
        raise ConfigError("report mode needs 'reports' (a list of {label, path})")
    labels, reports = [], []
    for entry in entries:
        try:
            label, path = entry["label"], Path(entry["path"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad reports entry {entry!r}") from exc
        if not path.is_file():
            raise DataError(f"report not found: {path}")
        labels.append(label)
        reports.append(RunReport.load(path))
    text = render_comparison(reports, labels)
    (run_dir / "comparison.txt").write_text(text)
    (run_dir / "comparison.json").write_text(json.dumps(comparison_data(reports, labels), indent=2) + "\n")
    print(text, end="")


DISPATCH = {
    "synth": mode_synth,
    "prepare": mode_prepare,
    "train": mode_train,
    "eval": mode_eval,
    "zeroshot": mode_zeroshot,
    "finetune-adapter": mode_finetune,
    "scratch": mode_scratch,
    "export-embeddings": mode_export,
    "report": mode_report,
}


# --------------------------------------------------------------------------
# entrypoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptus", description="Prompt-conditioned ultrasound segmentation and classification")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5 (repeatable)")
    parser.add_argument("--run-dir", default="runs", help="parent directory for run directories (default: runs)")
    parser.add_argument("--quiet", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.overrides, args.mode, args.seed)
        data_options(cfg, model_config(cfg).image_size)
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    run_dir = Path(args.run_dir) / run_dir_name(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        log.error("run directory %s is in use by another invocation", run_dir)
        return EXIT_CONFIG
    try:
        (run_dir / "config.echo").write_text(yaml.safe_dump(cfg, sort_keys=True))
        print(run_dir)
        DISPATCH[cfg["mode"]](cfg, run_dir)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingProjections, DataError, FileNotFoundError) as exc:
        log.error("data error: %s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except (NonFiniteLoss, FrozenParameterDrift) as exc:
        log.error("training failure: %s: %s", type(exc).__name__, exc)
        return EXIT_TRAINING
    except ValueError as exc:
        # invalid values inside config sections (e.g. epochs = 0)
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    finally:
        lock.release()
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
