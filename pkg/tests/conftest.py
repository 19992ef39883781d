from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterator
from pathlib import Path

import numpy as np
import pytest

from pamprobe.cli import main
from pamprobe.corpus import DatasetRegistry, LabeledClip
from pamprobe.synthetic import SyntheticCorpus, tone_corpus

REPO_ROOT = Path(__file__).resolve().parents[1]
CliRunner = Callable[..., tuple[int, str, str]]


@pytest.fixture(autouse=True)
def _isolated_environment(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Iterator[None]:
    monkeypatch.setenv("PAMPROBE_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("PAMPROBE_LOG", raising=False)
    monkeypatch.delenv("PAMPROBE_WORKERS", raising=False)
    yield
    logger = logging.getLogger("pamprobe")
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_tones() -> SyntheticCorpus:
    """Two tone datasets, 14 clips per class: enough for k=4 with 10 test clips."""
    return tone_corpus(2, clips_per_class=14, ambient_per_dataset=3, duration_s=0.5)


@pytest.fixture
def run_cli(capsys: pytest.CaptureFixture[str]) -> CliRunner:
    def run(*argv: str | Path) -> tuple[int, str, str]:
        code = main([str(arg) for arg in argv])
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return run


def make_clips(
    dataset_id: str, counts: dict[tuple[str, str | None], int], *, prefix: str = "c"
) -> list[LabeledClip]:
    clips = []
    for (primary, secondary), count in counts.items():
        tag = secondary or primary
        for index in range(count):
            clips.append(LabeledClip(dataset_id, f"{prefix}-{tag}-{index:03d}", primary, secondary))
    return clips


def make_registry(**datasets: dict[tuple[str, str | None], int]) -> DatasetRegistry:
    return DatasetRegistry({name: tuple(make_clips(name, counts)) for name, counts in datasets.items()})


def write_manifest(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path
