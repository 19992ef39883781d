"""Error catalog for the harness.

Every variant carries a stable ``code`` and the process ``exit_code`` the CLI
uses for it. See docs/reference/error-codes.md for recovery guidance.
"""

from __future__ import annotations

from typing import Any

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


class PamProbeError(Exception):
    code = "error"
    exit_code = EXIT_RUNTIME

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context = {key: value for key, value in context.items() if value is not None}

    def to_payload(self) -> dict[str, Any]:
        return {"error": self.code, "message": self.message, **self.context}


class UsageError(PamProbeError):
    code = "usage"
    exit_code = EXIT_USAGE


class ConfigError(PamProbeError):
    code = "config"
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, *, field: str | None = None, **context: Any) -> None:
        super().__init__(message, field=field, **context)
        self.field = field


class ManifestError(ConfigError):
    code = "manifest"

    def __init__(
        self,
        message: str,
        *,
        field: str | None = None,
        line: int | None = None,
        **context: Any,
    ) -> None:
        rendered = f"{message} (line {line})" if line is not None else message
        super().__init__(rendered, field=field, line=line, **context)
        self.line = line


class WavFormatError(PamProbeError):
    code = "wav_format"


class UnsupportedWavError(PamProbeError):
    code = "wav_unsupported"


class InvalidWaveformError(PamProbeError):
    code = "invalid_waveform"


class EmptyInputError(PamProbeError):
    code = "empty_input"


class InsufficientSamplesError(PamProbeError):
    code = "insufficient_samples"

    def __init__(self, message: str, *, class_name: str, **context: Any) -> None:
        super().__init__(message, class_name=class_name, **context)
        self.class_name = class_name


class NotFoundError(PamProbeError):
    code = "not_found"


class StoreError(PamProbeError):
    code = "store"


class BackendError(PamProbeError):
    code = "backend"

    def __init__(self, message: str, *, clip_id: str, **context: Any) -> None:
        super().__init__(message, clip_id=clip_id, **context)
        self.clip_id = clip_id


class UndefinedAucError(PamProbeError):
    code = "undefined_auc"

    def __init__(self, message: str, *, class_name: str) -> None:
        super().__init__(message, class_name=class_name)
        self.class_name = class_name


class InfiniteReductionError(PamProbeError):
    code = "infinite_reduction"


class DivergenceError(PamProbeError):
    code = "divergence"

    def __init__(
        self, message: str, *, epoch: int | None = None, step: int | None = None
    ) -> None:
        super().__init__(message, epoch=epoch, step=step)
        self.epoch = epoch
        self.step = step


class FileIoError(PamProbeError):
    code = "io"
