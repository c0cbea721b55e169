"""Per-dataset metric tables, comparison rendering and embedding export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from promptus.data import ManifestRecord
from promptus.model import PromptedUSNet

TASK_ORDER = {"seg": 0, "cls": 1}


class EmptyRows(ValueError):
    pass


class KeyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MetricRow:
    dataset_id: str
    task: str  # "seg" or "cls"
    value: float


@dataclass
class RunReport:
    rows: list[MetricRow]
    seg_average: float | None
    cls_average: float | None
    total_average: float
    parameters: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def keys(self) -> list[tuple[str, str]]:
        return [(row.dataset_id, row.task) for row in self.rows]

    def value(self, dataset_id: str, task: str) -> float:
        for row in self.rows:
            if (row.dataset_id, row.task) == (dataset_id, task):
                return row.value
        raise KeyError((dataset_id, task))

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(row) for row in self.rows],
            "seg_average": self.seg_average,
            "cls_average": self.cls_average,
            "total_average": self.total_average,
            "parameters": dict(self.parameters),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, values: dict) -> "RunReport":
        rows = [MetricRow(**row) for row in values["rows"]]
        rep = aggregate(rows)
        rep.parameters = values.get("parameters", {})
        rep.metadata = values.get("metadata", {})
        return rep

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sorted_rows(rows: Iterable[MetricRow]) -> list[MetricRow]:
    return sorted(rows, key=lambda row: (TASK_ORDER.get(row.task, 9), row.dataset_id))


def aggregate(rows: Iterable, parameters: dict | None = None, metadata: dict | None = None) -> RunReport:
    """Unweighted means per task and over all rows.

    ``rows`` holds MetricRows or ``(dataset_id, task, value)`` triples.
    """
    rows = [row if isinstance(row, MetricRow) else MetricRow(*row) for row in rows]
    if not rows:
        raise EmptyRows("aggregate needs at least one row")
    rows = _sorted_rows(rows)
    seg = [row.value for row in rows if row.task == "seg"]
    cls = [row.value for row in rows if row.task == "cls"]
    return RunReport(
        rows=rows,
        seg_average=float(np.mean(seg)) if seg else None,
        cls_average=float(np.mean(cls)) if cls else None,
        total_average=float(np.mean([row.value for row in rows])),
        parameters=dict(parameters or {}),
        metadata=dict(metadata or {}),
    )


def report_from_metrics(metrics: dict[tuple[str, str], float], **kw) -> RunReport:
    return aggregate([MetricRow(dataset_id, task, value) for (dataset_id, task), value in metrics.items()], **kw)


# --------------------------------------------------------------------------
# comparison tables


def _aggregate_lines(ref: RunReport) -> list[tuple[str, str]]:
    n_seg = sum(row.task == "seg" for row in ref.rows)
    n_cls = sum(row.task == "cls" for row in ref.rows)
    lines = []
    if n_seg > 1:
        lines.append(("Seg Average", "seg_average"))
    if n_cls > 1:
        lines.append(("Cls Average", "cls_average"))
    lines.append(("Total Average" if lines else "Average", "total_average"))
    return lines


def comparison_data(reports: Sequence[RunReport], labels: Sequence[str]) -> dict:
    if len(reports) != len(labels):
        raise ValueError("one label per report")
    if not reports:
        raise EmptyRows("nothing to compare")
    ref = set(reports[0].keys())
    for label, rep in zip(labels[1:], reports[1:]):
        keys = set(rep.keys())
        if keys != ref:
            missing = sorted(ref - keys)
            extra = sorted(keys - ref)
            raise KeyMismatch(f"report {label!r} differs from {labels[0]!r}: missing {missing}, extra {extra}")
    rows = [
        {"dataset": row.dataset_id, "task": row.task, "values": {lab: rep.value(row.dataset_id, row.task)
                                                             for lab, rep in zip(labels, reports)}}
        for row in reports[0].rows
    ]
    aggregates = [
        {"name": name, "values": {lab: getattr(rep, attr) for lab, rep in zip(labels, reports)}}
        for name, attr in _aggregate_lines(reports[0])
    ]
    return {"columns": list(labels), "rows": rows, "aggregates": aggregates}


def _pct(value) -> str:
    return "/" if value is None else f"{100.0 * value:.2f}%"


def render_comparison(reports: Sequence[RunReport], labels: Sequence[str], notes: Sequence[str] = ()) -> str:
    """Aligned text table: one row per (dataset, task), aggregates at the bottom."""
    data = comparison_data(reports, labels)
    header = ["Dataset", "Task"] + list(labels)
    body = [[row["dataset"], row["task"]] + [_pct(row["values"][label]) for label in labels] for row in data["rows"]]
    agg = [[entry["name"], ""] + [_pct(entry["values"][label]) for label in labels] for entry in data["aggregates"]]
    widths = [max(len(str(line[column])) for line in [header] + body + agg) for column in range(len(header))]

    def fmt(line):
        return "  ".join(str(cell).ljust(width) if column < 2 else str(cell).rjust(width)
                         for column, (cell, width) in enumerate(zip(line, widths))).rstrip()

    rule = "-" * len(fmt(header))
    out = [fmt(header), rule] + [fmt(line) for line in body] + [rule] + [fmt(line) for line in agg]
    out += list(notes)
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# embeddings


@torch.no_grad()
def export_embeddings(model: PromptedUSNet, records: Sequence[ManifestRecord], store, batch_size: int = 16) -> list[dict]:
    """Mean-pooled bottleneck vector per record; no dimensionality reduction."""
    was_training = model.training
    model.eval()
    rows = []
    dtype = next(model.parameters()).dtype
    try:
        for start in range(0, len(records), batch_size):
            refs = list(records[start:start + batch_size])
            images = torch.from_numpy(np.stack([store.get(record)[0] for record in refs])).unsqueeze(1)
            emb = model.encode(images.to(dtype)).bottleneck.mean(dim=1).double().numpy()
            for record, vector in zip(refs, emb):
                rows.append({"record_id": record.record_id, "dataset_id": record.dataset_id,
                             "position": record.position, "embedding": vector.tolist()})
    finally:
        model.train(was_training)
    return rows


def embeddings_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    dim = len(rows[0]["embedding"]) if rows else 0
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record_id", "dataset_id", "position"] + [f"e{index}" for index in range(dim)])
    for row in rows:
        if len(row["embedding"]) != dim:
            raise ValueError("embedding length varies across rows")
        values = [repr(float(component)) for component in row["embedding"]]
        writer.writerow([row["record_id"], row["dataset_id"], row["position"]] + values)
    return buf.getvalue()


def write_embeddings(rows: Sequence[dict], path: str | Path) -> None:
    Path(path).write_text(embeddings_to_csv(rows))
