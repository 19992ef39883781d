"""CSV / JSON emission and reload of evaluation, sweep, rotation and bench results."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any, Literal

from .bench import BenchResult
from .errors import ConfigError
from .eval_protocol import EvalRecord, EvalReport, RotationResult, SweepRow
from .io import json_dump, load_json, read_csv_rows, write_csv_rows
from .probe import error_reduction

logger = logging.getLogger(__name__)

ReportFormat = Literal["csv", "json"]

RECORD_COLUMNS = ["model", "dataset", "k", "repeat", "seed", "macro_auc", "status", "reason"]
CLASS_PREFIX = "auc:"
AGGREGATE_COLUMNS = ["model", "dataset", "k", "mean", "std", "n"]
SWEEP_COLUMNS = ["training_data", "stage", "batch", "arch", "lr", "bird_weight", "auc", "reason"]
SWEEP_AXES = ["batch", "arch", "lr", "bird_weight"]
BENCH_COLUMNS = ["backend", "batch_size", "workers", "wall_time_s", "rtf", "status", "reason"]
ROTATION_COLUMNS = ["holdout", "training_datasets", "removed_classes", "mean_auc", "status", "reason"]
REDUCTION_COLUMNS = ["model", "k", "mean_auc", "reference", "reference_auc", "error_reduction"]
NOT_PROBED = "NA"


def infer_format(path: str | Path, fmt: str | None = None) -> ReportFormat:
    chosen = fmt or Path(path).suffix.lstrip(".").lower()
    if chosen not in ("csv", "json"):
        raise ConfigError(f"unsupported report format {chosen!r}", field="format")
    return chosen  # type: ignore[return-value]


def _records(records: EvalReport | Iterable[EvalRecord]) -> tuple[list[EvalRecord], dict[str, str]]:
    if isinstance(records, EvalReport):
        return list(records.records), dict(records.conventions)
    return list(records), {}


def record_row(record: EvalRecord) -> dict[str, Any]:
    row: dict[str, Any] = {
        "model": record.model,
        "dataset": record.dataset,
        "k": record.k,
        "repeat": record.repeat,
        "seed": record.seed,
        "macro_auc": record.macro_auc,
        "status": record.status,
        "reason": record.reason,
    }
    for name, value in record.per_class.items():
        row[CLASS_PREFIX + name] = value
    return row


def record_columns(records: Sequence[EvalRecord]) -> list[str]:
    classes = sorted({name for record in records for name in record.per_class})
    return RECORD_COLUMNS + [CLASS_PREFIX + name for name in classes]


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def emit_report(
    records: EvalReport | Iterable[EvalRecord],
    path: str | Path,
    fmt: ReportFormat | None = None,
) -> None:
    """Write records with a stable column order; CSV conventions go to ``<stem>.meta.json``."""
    out = Path(path)
    items, conventions = _records(records)
    if infer_format(out, fmt) == "json":
        json_dump(
            out,
            {"conventions": conventions, "records": [record_row(record) for record in items]},
        )
        return
    write_csv_rows(out, record_columns(items), [record_row(record) for record in items])
    json_dump(_meta_path(out), {"conventions": conventions})


def _optional_float(value: Any) -> float | None:
    if value in (None, ""):
        return None
    return float(value)


def record_from_row(row: dict[str, Any]) -> EvalRecord:
    per_class = {
        key[len(CLASS_PREFIX) :]: float(value)
        for key, value in row.items()
        if key.startswith(CLASS_PREFIX) and value not in (None, "")
    }
    try:
        return EvalRecord(
            model=str(row["model"]),
            dataset=str(row["dataset"]),
            k=int(row["k"]),
            repeat=int(row["repeat"]),
            seed=int(row["seed"]),
            macro_auc=_optional_float(row.get("macro_auc")),
            per_class=per_class,
            status=row.get("status") or "ok",
            reason=row.get("reason") or None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed report row: {exc}") from exc


def load_report(path: str | Path, fmt: ReportFormat | None = None) -> EvalReport:
    source = Path(path)
    if infer_format(source, fmt) == "json":
        payload = load_json(source)
        return EvalReport(
            [record_from_row(row) for row in payload.get("records", [])],
            dict(payload.get("conventions", {})),
        )
    _, rows = read_csv_rows(source)
    meta = _meta_path(source)
    conventions = load_json(meta).get("conventions", {}) if meta.exists() else {}
    return EvalReport([record_from_row(row) for row in rows], dict(conventions))


def merge_reports(paths: Iterable[str | Path]) -> EvalReport:
    merged = EvalReport()
    for path in paths:
        merged.extend(load_report(path))
    return merged


def emit_aggregates(report: EvalReport, path: str | Path) -> None:
    rows = [
        {"model": a.model, "dataset": a.dataset, "k": a.k, "mean": a.mean, "std": a.std, "n": a.n}
        for a in report.aggregates()
    ]
    write_csv_rows(path, AGGREGATE_COLUMNS, rows)


def reduction_rows(report: EvalReport, reference: str, reference_auc: float) -> list[dict[str, Any]]:
    """Error reduction of each model's mean AUC (per k and overall) against a reference AUC."""
    rows = []
    for aggregate in report.aggregates():
        if aggregate.dataset != "*":
            continue
        rows.append(
            {
                "model": aggregate.model,
                "k": aggregate.k,
                "mean_auc": aggregate.mean,
                "reference": reference,
                "reference_auc": reference_auc,
                "error_reduction": _reduction(aggregate.mean, reference_auc),
            }
        )
    for model in sorted({record.model for record in report.ok()}):
        mean = report.mean_auc(model)
        rows.append(
            {
                "model": model,
                "k": "all",
                "mean_auc": mean,
                "reference": reference,
                "reference_auc": reference_auc,
                "error_reduction": _reduction(mean, reference_auc),
            }
        )
    return rows


def _reduction(mean_auc: float, reference_auc: float) -> float | None:
    better, worse = max(mean_auc, reference_auc), min(mean_auc, reference_auc)
    if better == 1.0:
        return None
    value = error_reduction(better, worse)
    return value if mean_auc >= reference_auc else -value


def emit_reductions(rows: list[dict[str, Any]], path: str | Path) -> None:
    write_csv_rows(path, REDUCTION_COLUMNS, rows)


def sweep_row(row: SweepRow) -> dict[str, Any]:
    out: dict[str, Any] = {"training_data": row.training_data, "stage": row.stage}
    for axis in SWEEP_AXES:
        value = row.value(axis)
        out[axis] = NOT_PROBED if value is None else value
    out["auc"] = row.auc
    out["reason"] = row.reason
    return out


def emit_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    write_csv_rows(path, SWEEP_COLUMNS, [sweep_row(row) for row in rows])


def emit_rotations(results: Sequence[RotationResult], path: str | Path) -> None:
    rows = [
        {
            "holdout": result.holdout,
            "training_datasets": ";".join(result.training_datasets),
            "removed_classes": json.dumps(result.removed_classes, sort_keys=True),
            "mean_auc": result.report.mean_auc() if result.report is not None else None,
            "status": result.status,
            "reason": result.reason,
        }
        for result in results
    ]
    write_csv_rows(path, ROTATION_COLUMNS, rows)


def emit_bench(result: BenchResult, path: str | Path) -> None:
    rows = [
        {
            "backend": result.backend,
            "batch_size": cell.batch_size,
            "workers": cell.workers,
            "wall_time_s": cell.wall_time_s,
            "rtf": cell.rtf,
            "status": cell.status,
            "reason": cell.reason,
        }
        for cell in result.cells
    ]
    write_csv_rows(path, BENCH_COLUMNS, rows)
