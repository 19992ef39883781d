from __future__ import annotations

import json
from pathlib import Path

import pytest

from pamprobe.bench import BenchCell, BenchResult
from pamprobe.errors import ConfigError
from pamprobe.eval_protocol import EvalRecord, EvalReport, RotationResult, SweepRow, derive_seed
from pamprobe.io import read_csv_rows
from pamprobe.reports import (
    AGGREGATE_COLUMNS,
    BENCH_COLUMNS,
    RECORD_COLUMNS,
    SWEEP_COLUMNS,
    emit_aggregates,
    emit_bench,
    emit_reductions,
    emit_report,
    emit_rotations,
    emit_sweep,
    infer_format,
    load_report,
    merge_reports,
    reduction_rows,
)


def _report(model: str = "mock", dataset: str = "reef0") -> EvalReport:
    records = []
    for k in (4, 8, 16, 32):
        for repeat in range(10):
            auc = 0.5 + 0.01 * k + 0.001 * repeat
            records.append(
                EvalRecord(
                    model,
                    dataset,
                    k,
                    repeat,
                    derive_seed(0, dataset, k, repeat),
                    auc,
                    {"grunt": auc, "boat": 1.0 / 3.0},
                )
            )
    records.append(EvalRecord(model, dataset, 64, 0, 1, status="skipped", reason="class 'boat' needs 74"))
    return EvalReport(records, {"auc": "macro", "seeds": "paired"})


def test_format_follows_the_suffix_unless_given(tmp_path: Path) -> None:
    assert infer_format(tmp_path / "r.csv") == "csv"
    assert infer_format(tmp_path / "r.out", "json") == "json"
    with pytest.raises(ConfigError):
        infer_format(tmp_path / "r.parquet")


def test_csv_emission_has_a_stable_header_and_one_row_per_record(tmp_path: Path) -> None:
    path = tmp_path / "fewshot.csv"

    emit_report(_report(), path)
    columns, rows = read_csv_rows(path)

    assert columns == RECORD_COLUMNS + ["auc:boat", "auc:grunt"]
    assert len(rows) == 41
    assert rows[-1]["status"] == "skipped"
    assert rows[-1]["macro_auc"] == ""
    assert json.loads((tmp_path / "fewshot.meta.json").read_text())["conventions"]["seeds"] == "paired"


@pytest.mark.parametrize("suffix", ["csv", "json"])
def test_emit_then_reload_is_lossless(tmp_path: Path, suffix: str) -> None:
    report = _report()
    path = tmp_path / f"fewshot.{suffix}"

    emit_report(report, path)
    loaded = load_report(path)

    assert loaded.records == report.records
    assert loaded.conventions == report.conventions


def test_csv_and_json_emissions_parse_to_the_same_records(tmp_path: Path) -> None:
    report = _report()
    emit_report(report, tmp_path / "a.csv")
    emit_report(report, tmp_path / "a.json")

    assert load_report(tmp_path / "a.csv").records == load_report(tmp_path / "a.json").records


def test_malformed_rows_are_config_errors(tmp_path: Path) -> None:
    path = tmp_path / "bad.csv"
    path.write_text("model,dataset,k,repeat,seed,macro_auc\nm,d,four,0,1,0.5\n", encoding="utf-8")

    with pytest.raises(ConfigError):
        load_report(path)


def test_merge_and_aggregate(tmp_path: Path) -> None:
    emit_report(_report(dataset="reef0"), tmp_path / "a.csv")
    emit_report(_report(dataset="reef1"), tmp_path / "b.json")

    merged = merge_reports([tmp_path / "a.csv", tmp_path / "b.json"])
    emit_aggregates(merged, tmp_path / "aggregates.csv")
    columns, rows = read_csv_rows(tmp_path / "aggregates.csv")

    assert len(merged.records) == 82
    assert columns == AGGREGATE_COLUMNS
    # per dataset and pooled, four ks each
    assert len(rows) == 12
    pooled = [row for row in rows if row["dataset"] == "*"]
    assert [row["n"] for row in pooled] == ["20", "20", "20", "20"]


def test_error_reductions_against_a_reference() -> None:
    report = EvalReport(
        [
            EvalRecord("birdnet", "reef0", 4, 0, 1, 0.908),
            EvalRecord("vggish", "reef0", 4, 0, 2, 0.7),
        ]
    )

    rows = {(row["model"], row["k"]): row for row in reduction_rows(report, "reefset", 0.724)}

    assert rows[("birdnet", 4)]["error_reduction"] == pytest.approx(200.0)
    assert rows[("birdnet", "all")]["error_reduction"] == pytest.approx(200.0)
    assert rows[("vggish", 4)]["error_reduction"] < 0


def test_reduction_file(tmp_path: Path) -> None:
    report = EvalReport([EvalRecord("perfect", "reef0", 4, 0, 1, 1.0)])

    emit_reductions(reduction_rows(report, "reefset", 0.724), tmp_path / "reductions.csv")
    _, rows = read_csv_rows(tmp_path / "reductions.csv")

    assert rows[0]["error_reduction"] == ""


def test_sweep_csv_marks_unprobed_axes(tmp_path: Path) -> None:
    rows = [
        SweepRow("reef_bird", "1", {"lr": 0.001, "bird_weight": 0.5, "arch": "t0", "batch": 64}, ("lr", "bird_weight"), 0.81),
        SweepRow("reef_bird", "2", {"lr": 0.001, "arch": "t1", "batch": 128}, ("arch", "batch"), None, "diverged"),
    ]

    emit_sweep(rows, tmp_path / "sweep.csv")
    columns, written = read_csv_rows(tmp_path / "sweep.csv")

    assert columns == SWEEP_COLUMNS
    assert written[0]["arch"] == "NA"
    assert written[0]["bird_weight"] == "0.5"
    assert written[1]["lr"] == "NA"
    assert written[1]["auc"] == ""
    assert written[1]["reason"] == "diverged"


def test_rotation_csv(tmp_path: Path) -> None:
    report = EvalReport([EvalRecord("toy", "reef0", 4, 0, 1, 0.75)])
    results = [
        RotationResult("reef0", ["reef1", "reef2"], report, {"reef:secondary": ["c0"]}),
        RotationResult("reef1", [], None, status="failed", reason="empty mixture"),
    ]

    emit_rotations(results, tmp_path / "rotations.csv")
    _, rows = read_csv_rows(tmp_path / "rotations.csv")

    assert rows[0]["training_datasets"] == "reef1;reef2"
    assert json.loads(rows[0]["removed_classes"]) == {"reef:secondary": ["c0"]}
    assert rows[0]["mean_auc"] == "0.75"
    assert rows[1]["status"] == "failed"


def test_bench_csv(tmp_path: Path) -> None:
    result = BenchResult("mock", 60.0, [BenchCell(8, 1, 1.5, 40.0), BenchCell(8, 4, None, None, "failed", "x")])

    emit_bench(result, tmp_path / "bench.csv")
    columns, rows = read_csv_rows(tmp_path / "bench.csv")

    assert columns == BENCH_COLUMNS
    assert [row["rtf"] for row in rows] == ["40.0", ""]
