"""Inference speed benchmark over a batch-size x worker-count grid."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

from .audio_io import Waveform, resample, synth
from .dsp_frontend import window_clip
from .embedder import EmbeddingBackend
from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_BATCH_GRID: tuple[int, ...] = (8, 16, 32, 64, 128)
DEFAULT_WORKER_GRID: tuple[int, ...] = (1, 4, 8, 12, 16)

CellStatus = Literal["ok", "failed"]


@dataclass(frozen=True, slots=True)
class BenchCell:
    batch_size: int
    workers: int
    wall_time_s: float | None
    rtf: float | None
    status: CellStatus = "ok"
    reason: str | None = None


@dataclass(slots=True)
class BenchResult:
    backend: str
    audio_duration_s: float
    cells: list[BenchCell] = field(default_factory=list)

    @property
    def best(self) -> BenchCell | None:
        ok = [cell for cell in self.cells if cell.status == "ok"]
        return min(ok, key=lambda cell: cell.wall_time_s) if ok else None

    def summary(self) -> str:
        best = self.best
        if best is None:
            return f"{self.backend}: every cell failed"
        return (
            f"{self.backend}: best RTF {best.rtf:.2f} at batch {best.batch_size}, "
            f"{best.workers} workers ({best.wall_time_s:.3f} s for {self.audio_duration_s:.0f} s audio)"
        )


def real_time_factor(audio_duration_s: float, wall_time_s: float) -> float:
    """Audio seconds processed per wall-clock second."""
    if wall_time_s <= 0:
        raise ConfigError(f"wall time must be positive, got {wall_time_s}", field="wall_time_s")
    return audio_duration_s / wall_time_s


def chop(wave: Waveform, backend: EmbeddingBackend) -> list[Waveform]:
    spec = backend.spec
    return window_clip(resample(wave, spec.input_rate), "split_and_collect", spec.window_len_s)


def bench_inference(
    backend: EmbeddingBackend,
    duration_s: float = 3600.0,
    rate: int = 32_000,
    batch_grid: Sequence[int] = DEFAULT_BATCH_GRID,
    worker_grid: Sequence[int] = DEFAULT_WORKER_GRID,
    *,
    seed: int = 0,
    clock: Callable[[], float] = time.perf_counter,
) -> BenchResult:
    """Time embedding of a synthetic recording for every grid cell.

    Synthesis, resampling and windowing happen once, outside the timed region.
    """
    if not batch_grid or not worker_grid:
        raise ConfigError("batch and worker grids must not be empty", field="grid")
    name = getattr(backend, "name", backend.spec.name)
    windows = chop(synth("noise", duration_s, rate, seed=seed, amplitude=0.5), backend)
    result = BenchResult(name, duration_s)
    for batch_size in batch_grid:
        batches = [windows[start : start + batch_size] for start in range(0, len(windows), batch_size)]
        for workers in worker_grid:
            try:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    start = clock()
                    for _ in pool.map(backend.embed_batch, batches):
                        pass
                    wall = clock() - start
                cell = BenchCell(batch_size, workers, wall, real_time_factor(duration_s, wall))
            except Exception as exc:  # recorded as a failed cell
                logger.warning("bench cell batch=%d workers=%d failed: %s", batch_size, workers, exc)
                cell = BenchCell(batch_size, workers, None, None, "failed", str(exc))
            logger.info(
                "bench batch=%d workers=%d wall=%s", batch_size, workers,
                f"{cell.wall_time_s:.3f}s" if cell.wall_time_s is not None else "failed",
            )
            result.cells.append(cell)
    return result
