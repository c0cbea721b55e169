import itertools
import random

import pytest

from promptus.reporting import (
    EmptyRows,
    KeyMismatch,
    MetricRow,
    RunReport,
    aggregate,
    comparison_data,
    embeddings_to_csv,
    render_comparison,
)

TABLE2_PROMPT_SEG = [("BUS-BRA", 75.59), ("BUSIS", 87.84), ("CAMUS", 92.05), ("DDTI", 66.70),
                     ("Fetal_HC", 96.69), ("kidneyUS", 80.23), ("UDIAT", 61.00)]
TABLE2_PROMPT_CLS = [("Appendix", 52.84), ("BUS-BRA", 84.69), ("Fatty-Liver", 92.36), ("UDIAT", 88.79)]


def test_aggregate_arithmetic():
    rep = aggregate([("a", "seg", 0.80), ("b", "seg", 0.90), ("c", "cls", 0.70)])
    assert rep.seg_average == pytest.approx(0.85)
    assert rep.cls_average == pytest.approx(0.70)
    assert rep.total_average == pytest.approx(0.80)


def test_single_row():
    rep = aggregate([("a", "cls", 0.42)])
    assert rep.cls_average == rep.total_average == 0.42
    assert rep.seg_average is None


def test_empty_rows():
    with pytest.raises(EmptyRows):
        aggregate([])


def test_table2_prompt_seg_average():
    rep = aggregate([(dataset_id, "seg", value) for dataset_id, value in TABLE2_PROMPT_SEG])
    assert abs(rep.seg_average - 80.01) <= 0.01


def test_permutation_invariance():
    rows = [(dataset_id, "seg", value) for dataset_id, value in TABLE2_PROMPT_SEG] + [(dataset_id, "cls", value) for dataset_id, value in TABLE2_PROMPT_CLS]
    ref = aggregate(rows)
    rng = random.Random(0)
    for _ in range(20):
        rng.shuffle(rows)
        rep = aggregate(rows)
        assert (rep.seg_average, rep.cls_average, rep.total_average) == (
            ref.seg_average, ref.cls_average, ref.total_average)


def test_json_round_trip(tmp_path):
    rep = aggregate([("a", "seg", 0.5), ("a", "cls", 0.25)], parameters={"total": 3}, metadata={"seed": 1})
    rep.save(tmp_path / "r.json")
    back = RunReport.load(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()


def _table3_reports():
    cols = {"Single": (60.85, 80.80), "w/o prompt": (66.90, 77.60), "prompt": (66.91, 78.40),
            "Scratch": (68.89, 85.90), "Adapter": (69.56, 86.40)}
    return cols, [aggregate([("BUSI", "seg", seg_value / 100), ("BUSI", "cls", cls_value / 100)]) for seg_value, cls_value in cols.values()]


def test_render_two_columns():
    first = aggregate([("x", "seg", 0.5), ("y", "cls", 0.75)])
    second = aggregate([("x", "seg", 0.6), ("y", "cls", 0.25)])
    text = render_comparison([first, second], ["A", "B"])
    header = text.splitlines()[0].split()
    assert header == ["Dataset", "Task", "A", "B"]
    assert "50.00%" in text and "60.00%" in text


def test_render_key_mismatch():
    first = aggregate([("x", "seg", 0.5)])
    second = aggregate([("z", "seg", 0.5)])
    with pytest.raises(KeyMismatch, match="z"):
        render_comparison([first, second], ["A", "B"])


def test_table3_shape():
    cols, reports = _table3_reports()
    data = comparison_data(reports, list(cols))
    assert [(row["dataset"], row["task"]) for row in data["rows"]] == [("BUSI", "seg"), ("BUSI", "cls")]
    assert [entry["name"] for entry in data["aggregates"]] == ["Average"]
    assert data["columns"] == ["Single", "w/o prompt", "prompt", "Scratch", "Adapter"]
    lines = render_comparison(reports, list(cols)).splitlines()
    assert [line.split()[0] for line in lines if not line.startswith("-")][1:] == ["BUSI", "BUSI", "Average"]
    assert abs(data["aggregates"][0]["values"]["Adapter"] * 100 - 77.98) <= 0.01


def test_render_is_stable():
    cols, reports = _table3_reports()
    assert render_comparison(reports, list(cols)) == render_comparison(reports, list(cols))


def test_embedding_csv_header_and_rows():
    rows = [{"record_id": f"r{index}", "dataset_id": "d", "position": "breast", "embedding": [0.1 * index, 1.0, -2.5]}
            for index in range(3)]
    text = embeddings_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "record_id,dataset_id,position,e0,e1,e2"
    assert len(lines) == 4
    assert embeddings_to_csv(rows) == text
