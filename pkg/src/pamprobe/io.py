from __future__ import annotations

import csv
import json
import struct
import time
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, BinaryIO

import jsonschema
import numpy as np

from .errors import ConfigError, FileIoError, StoreError
from .seeds import PRNG_ALGORITHM
from .settings import HARNESS_VERSION

DEFAULT_RUN_CONFIG_NAME = "run_config.json"

# magic, version, rows, cols (grid) / magic, version, dim, count (cache)
GRID_HEADER = struct.Struct("<4sIII")
GRID_MAGIC = b"PPSG"
GRID_VERSION = 1


def iso_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def render_json(payload: Any, *, indent: int | None = 2) -> str:
    return json.dumps(payload, indent=indent, sort_keys=True)


def json_dump(path: str | Path, payload: Any) -> None:
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(render_json(payload) + "\n", encoding="utf-8")
    except OSError as exc:
        raise FileIoError(f"could not write {out}: {exc}", path=str(out)) from exc


def load_json(path: str | Path) -> Any:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileIoError(f"could not read {source}: {exc}", path=str(source)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}", line=exc.lineno
        ) from exc


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict[str, Any]:
    text = resources.files("pamprobe").joinpath("schemas", f"{name}.schema.json").read_text(
        encoding="utf-8"
    )
    return json.loads(text)


def schema_errors(payload: Any, name: str) -> list[jsonschema.ValidationError]:
    validator = jsonschema.Draft202012Validator(load_schema(name))
    return sorted(validator.iter_errors(payload), key=lambda error: list(error.path))


def validate_payload(payload: Any, name: str) -> None:
    errors = schema_errors(payload, name)
    if errors:
        first = errors[0]
        location = "/".join(str(part) for part in first.path) or "<root>"
        raise ConfigError(f"{name}: {location}: {first.message}", field=location)


def write_run_config(
    directory: str | Path, command: str, args: dict[str, Any]
) -> Path:
    payload = {
        "harness_version": HARNESS_VERSION,
        "prng": PRNG_ALGORITHM,
        "command": command,
        "args": args,
        "created_at": iso_now(),
    }
    validate_payload(payload, "run-config")
    path = Path(directory) / DEFAULT_RUN_CONFIG_NAME
    json_dump(path, payload)
    return path


def write_header(handle: BinaryIO, magic: bytes, rows: int, cols: int) -> None:
    handle.write(GRID_HEADER.pack(magic, GRID_VERSION, rows, cols))


def read_header(handle: BinaryIO, magic: bytes) -> tuple[int, int]:
    raw = handle.read(GRID_HEADER.size)
    if len(raw) != GRID_HEADER.size:
        raise StoreError("truncated header")
    found, version, rows, cols = GRID_HEADER.unpack(raw)
    if found != magic:
        raise StoreError(f"bad magic {found!r}, expected {magic!r}")
    if version != GRID_VERSION:
        raise StoreError(f"unsupported container version {version}")
    return rows, cols


def write_grid(path: str | Path, values: np.ndarray) -> None:
    """Write a time x band grid as little-endian f32 rows."""
    grid = np.asarray(values)
    if grid.ndim != 2:
        raise StoreError(f"grid must be 2-D, got shape {grid.shape}")
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("wb") as handle:
            write_header(handle, GRID_MAGIC, grid.shape[0], grid.shape[1])
            handle.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())
    except OSError as exc:
        raise FileIoError(f"could not write {out}: {exc}", path=str(out)) from exc


def read_grid(path: str | Path) -> np.ndarray:
    source = Path(path)
    try:
        with source.open("rb") as handle:
            rows, cols = read_header(handle, GRID_MAGIC)
            payload = handle.read()
    except OSError as exc:
        raise FileIoError(f"could not read {source}: {exc}", path=str(source)) from exc
    expected = rows * cols * 4
    if len(payload) != expected:
        raise StoreError(f"{source}: expected {expected} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_csv_rows(path: str | Path, columns: list[str], rows: list[dict[str, Any]]) -> None:
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({column: render_cell(row.get(column)) for column in columns})
    except OSError as exc:
        raise FileIoError(f"could not write {out}: {exc}", path=str(out)) from exc


def read_csv_rows(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    source = Path(path)
    try:
        with source.open(encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            rows = list(reader)
            return list(reader.fieldnames or []), rows
    except OSError as exc:
        raise FileIoError(f"could not read {source}: {exc}", path=str(source)) from exc


def render_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
