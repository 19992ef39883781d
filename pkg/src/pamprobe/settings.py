from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

HARNESS_VERSION = "0.3.0"

CACHE_DIR_ENV = "PAMPROBE_CACHE_DIR"
LOG_ENV = "PAMPROBE_LOG"
WORKERS_ENV = "PAMPROBE_WORKERS"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def default_cache_dir() -> Path:
    configured = os.environ.get(CACHE_DIR_ENV)
    if configured:
        return Path(configured).expanduser()
    return Path.home() / ".cache" / "pamprobe"


def default_workers() -> int:
    configured = os.environ.get(WORKERS_ENV)
    if configured:
        try:
            value = int(configured)
        except ValueError:
            value = 0
        if value > 0:
            return value
    return os.cpu_count() or 1


def resolve_workers(requested: int | None) -> int:
    if requested is None or requested <= 0:
        return default_workers()
    return requested


def configure_logging(verbosity: int = 0) -> None:
    """Install the single stderr handler used by the CLI.

    Quiet by default; ``PAMPROBE_LOG`` wins over ``-v`` flags.
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    override = os.environ.get(LOG_ENV)
    if override:
        level = logging.getLevelName(override.strip().upper())
        if not isinstance(level, int):
            level = logging.WARNING
    root = logging.getLogger("pamprobe")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
