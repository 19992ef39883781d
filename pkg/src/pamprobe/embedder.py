"""Embedding backends and the clip-to-vector adapter.

``embed_clip`` adapts a clip to a backend's input contract (rate, window
length, short/long clip policy) and averages window embeddings. Backends:
the deterministic PCEN-statistics mock, the file-backed cache for
embeddings computed elsewhere, and the toy embedder trained by
``mixture_pretrain``.
"""

from __future__ import annotations

import logging
import struct
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from io import BytesIO
from pathlib import Path
from typing import Literal, Protocol, runtime_checkable

import numpy as np

from .audio_io import Waveform, read_wav, resample
from .corpus import LabeledClip
from .dsp_frontend import MelConfig, PcenConfig, frontend, window_clip
from .errors import BackendError, ConfigError, FileIoError, NotFoundError, PamProbeError, StoreError
from .io import read_csv_rows, read_header, write_header

logger = logging.getLogger(__name__)

ShortClipPolicy = Literal["zero_pad_tail", "repeat_pad"]
LongClipPolicy = Literal["split_and_mean"]
AudioLoader = Callable[[LabeledClip], Waveform]

CACHE_MAGIC = b"PPEC"
CLIP_ID_LENGTH = struct.Struct("<H")


@dataclass(frozen=True, slots=True)
class EmbedderSpec:
    name: str
    input_rate: int
    window_len_s: float
    embedding_dim: int
    short_clip_policy: ShortClipPolicy = "zero_pad_tail"
    long_clip_policy: LongClipPolicy = "split_and_mean"

    def __post_init__(self) -> None:
        if self.embedding_dim < 1:
            raise ConfigError(
                f"embedding_dim must be >= 1, got {self.embedding_dim}", field="embedding_dim"
            )
        if self.window_len_s <= 0:
            raise ConfigError(
                f"window_len_s must be positive, got {self.window_len_s}", field="window_len_s"
            )
        if self.input_rate <= 0:
            raise ConfigError(f"input_rate must be positive, got {self.input_rate}", field="input_rate")
        if self.short_clip_policy not in ("zero_pad_tail", "repeat_pad"):
            raise ConfigError(
                f"unknown short clip policy {self.short_clip_policy!r}", field="short_clip_policy"
            )
        if self.long_clip_policy != "split_and_mean":
            raise ConfigError(
                f"unknown long clip policy {self.long_clip_policy!r}", field="long_clip_policy"
            )

    @property
    def input_rate_khz(self) -> float:
        return self.input_rate / 1000.0

    @property
    def window_samples(self) -> int:
        return max(1, int(round(self.window_len_s * self.input_rate)))


# Input contracts of the networks compared in the transfer-learning study.
PRESETS: dict[str, EmbedderSpec] = {
    "vggish": EmbedderSpec("vggish", 16_000, 0.96, 128),
    "yamnet": EmbedderSpec("yamnet", 16_000, 0.96, 1024),
    "birdnet": EmbedderSpec("birdnet", 48_000, 3.0, 1024),
    "perch": EmbedderSpec("perch", 32_000, 5.0, 1280),
}


def embedder_preset(name: str) -> EmbedderSpec:
    try:
        return PRESETS[name]
    except KeyError as exc:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown embedder preset {name!r} (known: {known})", field="spec") from exc


@dataclass(frozen=True, slots=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    spec_name: str
    clip_id: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 1 or values.size == 0:
            raise ConfigError(f"embedding must be a non-empty vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"embedding for {self.clip_id!r} contains non-finite values")
        values = values.copy() if values is self.values else values
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def relabel(self, clip_id: str) -> EmbeddingVector:
        return EmbeddingVector(self.values, self.spec_name, clip_id)


@runtime_checkable
class EmbeddingBackend(Protocol):
    spec: EmbedderSpec

    def embed_batch(self, windows: Sequence[Waveform]) -> np.ndarray:
        """Embed fixed-length windows at ``spec.input_rate``; returns (n, dim)."""
        ...


@lru_cache(maxsize=8)
def _mock_frontend(rate: int) -> tuple[MelConfig, PcenConfig]:
    return MelConfig(n_mels=64, fmax=min(10_000.0, rate / 2)), PcenConfig()


def mock_features(window: Waveform) -> np.ndarray:
    """Per-band mean and standard deviation of the PCEN grid."""
    mel_cfg, pcen_cfg = _mock_frontend(window.sample_rate)
    grid = frontend(window, mel_cfg, pcen_cfg).values
    return np.concatenate([grid.mean(axis=0), grid.std(axis=0)])


def mock_embed(window: Waveform, spec: EmbedderSpec, clip_id: str = "") -> EmbeddingVector:
    if window.sample_rate != spec.input_rate:
        raise ConfigError(
            f"mock backend expects {spec.input_rate} Hz windows, got {window.sample_rate} Hz",
            field="input_rate",
        )
    features = np.resize(mock_features(window), spec.embedding_dim)
    norm = float(np.linalg.norm(features))
    if norm > 0:
        features = features / norm
    return EmbeddingVector(features.astype(np.float32), spec.name, clip_id)


class MockBackend:
    """Deterministic stand-in network: PCEN band statistics, tiled and L2-normalised."""

    def __init__(self, spec: EmbedderSpec | None = None) -> None:
        self.spec = spec or EmbedderSpec("mock", 16_000, 0.96, 128)
        self.name = "mock"

    def embed_batch(self, windows: Sequence[Waveform]) -> np.ndarray:
        if not windows:
            return np.zeros((0, self.spec.embedding_dim), dtype=np.float32)
        return np.stack([mock_embed(window, self.spec).values for window in windows])


class EmbeddingCache:
    """Clip-level embeddings keyed by clip id, one fixed dimension per store.

    Binary layout (little-endian): header {magic ``PPEC``, version, dim,
    count}, then per record a u16-length-prefixed UTF-8 clip id followed by
    ``dim`` f32 values.
    """

    def __init__(self, dim: int | None = None, spec_name: str = "cache") -> None:
        self.dim = dim
        self.spec_name = spec_name
        self._vectors: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, clip_id: object) -> bool:
        return clip_id in self._vectors

    @property
    def clip_ids(self) -> list[str]:
        return list(self._vectors)

    def put(self, clip_id: str, vector: EmbeddingVector | np.ndarray) -> None:
        values = vector.values if isinstance(vector, EmbeddingVector) else np.asarray(vector)
        values = np.asarray(values, dtype="<f4").reshape(-1)
        if len(clip_id.encode("utf-8")) > 0xFFFF:
            raise StoreError(f"clip id of {len(clip_id)} characters is too long for the cache")
        with self._lock:
            if self.dim is None:
                self.dim = int(values.shape[0])
            if values.shape[0] != self.dim:
                raise StoreError(
                    f"cache holds {self.dim}-d vectors, got {values.shape[0]}-d for {clip_id!r}"
                )
            self._vectors[clip_id] = values.copy()

    def get(self, clip_id: str) -> EmbeddingVector:
        try:
            values = self._vectors[clip_id]
        except KeyError as exc:
            raise NotFoundError(f"no cached embedding for clip {clip_id!r}", clip_id=clip_id) from exc
        return EmbeddingVector(values, self.spec_name, clip_id)

    def to_bytes(self) -> bytes:
        buffer = BytesIO()
        write_header(buffer, CACHE_MAGIC, self.dim or 0, len(self._vectors))
        for clip_id, values in self._vectors.items():
            encoded = clip_id.encode("utf-8")
            buffer.write(CLIP_ID_LENGTH.pack(len(encoded)))
            buffer.write(encoded)
            buffer.write(values.astype("<f4").tobytes())
        return buffer.getvalue()

    def save(self, path: str | Path) -> None:
        out = Path(path)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(self.to_bytes())
        except OSError as exc:
            raise FileIoError(f"could not write {out}: {exc}", path=str(out)) from exc
        logger.info("wrote %d embeddings to %s", len(self), out)

    @classmethod
    def from_bytes(cls, payload: bytes, spec_name: str = "cache") -> EmbeddingCache:
        handle = BytesIO(payload)
        dim, count = read_header(handle, CACHE_MAGIC)
        cache = cls(dim or None, spec_name)
        for index in range(count):
            raw_len = handle.read(CLIP_ID_LENGTH.size)
            if len(raw_len) != CLIP_ID_LENGTH.size:
                raise StoreError(f"truncated cache at record {index}")
            (length,) = CLIP_ID_LENGTH.unpack(raw_len)
            encoded = handle.read(length)
            data = handle.read(dim * 4)
            if len(encoded) != length or len(data) != dim * 4:
                raise StoreError(f"truncated cache at record {index}")
            cache._vectors[encoded.decode("utf-8")] = np.frombuffer(data, dtype="<f4").copy()
        if handle.read(1):
            raise StoreError("trailing bytes after the last cache record")
        return cache

    @classmethod
    def load(cls, path: str | Path, spec_name: str = "cache") -> EmbeddingCache:
        source = Path(path)
        try:
            payload = source.read_bytes()
        except FileNotFoundError as exc:
            raise NotFoundError(f"embedding cache {source} does not exist", path=str(source)) from exc
        except OSError as exc:
            raise FileIoError(f"could not read {source}: {exc}", path=str(source)) from exc
        return cls.from_bytes(payload, spec_name)

    def import_csv(self, path: str | Path) -> int:
        """Add rows of ``clip_id, v0..v{d-1}``; returns the number imported."""
        columns, rows = read_csv_rows(path)
        if not columns or columns[0] != "clip_id":
            raise ConfigError(f"{path}: first column must be clip_id", field="clip_id")
        value_columns = columns[1:]
        expected = [f"v{index}" for index in range(len(value_columns))]
        if value_columns != expected:
            raise ConfigError(f"{path}: value columns must be v0..v{len(expected) - 1}")
        for row in rows:
            try:
                values = np.array([float(row[column]) for column in value_columns])
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"{path}: non-numeric value for clip {row.get('clip_id')!r}"
                ) from exc
            self.put(row["clip_id"], values)
        return len(rows)


def cache_put(store: EmbeddingCache, clip_id: str, vector: EmbeddingVector | np.ndarray) -> None:
    store.put(clip_id, vector)


def cache_get(store: EmbeddingCache, clip_id: str) -> EmbeddingVector:
    return store.get(clip_id)


class CacheBackend:
    """Serves clip-level embeddings precomputed by an external network."""

    def __init__(self, cache: EmbeddingCache, spec: EmbedderSpec | None = None) -> None:
        if cache.dim is None:
            raise StoreError("cannot serve embeddings from an empty cache")
        self.cache = cache
        self.spec = spec or EmbedderSpec(cache.spec_name, 16_000, 1.0, cache.dim)
        self.name = self.spec.name
        if self.spec.embedding_dim != cache.dim:
            raise ConfigError(
                f"spec {self.spec.name!r} is {self.spec.embedding_dim}-d, cache is {cache.dim}-d",
                field="embedding_dim",
            )

    def lookup(self, clip_id: str) -> EmbeddingVector:
        vector = self.cache.get(clip_id)
        return EmbeddingVector(vector.values, self.spec.name, clip_id)

    def embed_batch(self, windows: Sequence[Waveform]) -> np.ndarray:
        raise BackendError("the cache backend only serves whole clips", clip_id="")


def wav_loader(root: str | Path | None = None) -> AudioLoader:
    base = Path(root) if root is not None else Path()

    def load(clip: LabeledClip) -> Waveform:
        if not clip.path:
            raise NotFoundError(f"clip {clip.clip_id!r} has no audio path", clip_id=clip.clip_id)
        return read_wav(base / clip.path)

    return load


def adapt_clip(wave: Waveform, spec: EmbedderSpec) -> list[Waveform]:
    """Resample to the backend rate and cut into backend windows."""
    wave = resample(wave, spec.input_rate)
    if len(wave) <= spec.window_samples:
        return window_clip(wave, spec.short_clip_policy, spec.window_len_s)
    return window_clip(wave, "split_and_collect", spec.window_len_s)


def embed_windows(backend: EmbeddingBackend, windows: Sequence[Waveform], clip_id: str) -> np.ndarray:
    try:
        out = np.asarray(backend.embed_batch(windows), dtype=np.float64)
    except BackendError:
        raise
    except PamProbeError as exc:
        raise BackendError(f"backend failed on clip {clip_id!r}: {exc.message}", clip_id=clip_id) from exc
    except Exception as exc:
        raise BackendError(f"backend failed on clip {clip_id!r}: {exc}", clip_id=clip_id) from exc
    if out.shape != (len(windows), backend.spec.embedding_dim):
        raise BackendError(
            f"backend returned shape {out.shape} for {len(windows)} windows of clip {clip_id!r}",
            clip_id=clip_id,
        )
    return out


def embed_clip(
    clip: LabeledClip,
    backend: EmbeddingBackend,
    spec: EmbedderSpec | None = None,
    *,
    loader: AudioLoader | None = None,
) -> EmbeddingVector:
    if isinstance(backend, CacheBackend):
        return backend.lookup(clip.clip_id)
    spec = spec or backend.spec
    if spec != backend.spec:
        raise ConfigError(
            f"spec {spec.name!r} does not match backend spec {backend.spec.name!r}", field="spec"
        )
    wave = (loader or wav_loader())(clip)
    windows = adapt_clip(wave, spec)
    embeddings = embed_windows(backend, windows, clip.clip_id)
    return EmbeddingVector(embeddings.mean(axis=0).astype(np.float32), spec.name, clip.clip_id)


def embed_clips(
    clips: Iterable[LabeledClip],
    backend: EmbeddingBackend,
    *,
    loader: AudioLoader | None = None,
    cache: EmbeddingCache | None = None,
) -> dict[str, EmbeddingVector]:
    """Embed clips, reading through and filling ``cache`` when given."""
    out: dict[str, EmbeddingVector] = {}
    for clip in clips:
        if cache is not None and clip.clip_id in cache:
            out[clip.clip_id] = cache.get(clip.clip_id)
            continue
        vector = embed_clip(clip, backend, loader=loader)
        if cache is not None:
            cache.put(clip.clip_id, vector)
        out[clip.clip_id] = vector
    return out
