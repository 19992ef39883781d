"""Waveform container, WAV I/O, polyphase resampling and test-signal synthesis.

This is the only module that touches raw audio bytes.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import (
    ConfigError,
    FileIoError,
    InvalidWaveformError,
    UnsupportedWavError,
    WavFormatError,
)
from .seeds import make_rng

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0

# Polyphase prototype: each branch sees RESAMPLE_TAPS coefficients of a
# Kaiser-windowed sinc (beta 8.6, ~86 dB stopband) cut at the lower Nyquist.
RESAMPLE_TAPS = 64
RESAMPLE_KAISER_BETA = 8.6

SynthKind = Literal["silence", "sine", "noise"]


@dataclass(frozen=True, slots=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int
    channels: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.sample_rate, bool) or int(self.sample_rate) != self.sample_rate:
            raise InvalidWaveformError(f"sample_rate must be an integer, got {self.sample_rate!r}")
        if self.sample_rate <= 0:
            raise InvalidWaveformError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.channels != 1:
            raise InvalidWaveformError("waveforms are mono after load")
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise InvalidWaveformError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidWaveformError("samples contain non-finite values")
        if samples.size and float(np.max(np.abs(samples))) > 1.0:
            raise InvalidWaveformError("samples clip beyond [-1, 1]")
        samples = samples.copy() if samples is self.samples else samples
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    @property
    def peak(self) -> float:
        if not len(self):
            return 0.0
        return float(np.max(np.abs(self.samples)))


def read_wav(path: str | Path) -> Waveform:
    source = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(source)
    except FileNotFoundError as exc:
        raise FileIoError(f"{source}: no such file", path=str(source)) from exc
    except OSError as exc:
        raise FileIoError(f"could not read {source}: {exc}", path=str(source)) from exc
    except (ValueError, EOFError) as exc:
        raise WavFormatError(f"{source}: malformed RIFF/WAVE data: {exc}", path=str(source)) from exc
    if data.dtype != np.int16:
        raise UnsupportedWavError(
            f"{source}: only PCM 16-bit is supported, found {data.dtype}", path=str(source)
        )
    if data.ndim == 2:
        if data.shape[1] > 2:
            raise UnsupportedWavError(
                f"{source}: {data.shape[1]} channels; only mono and stereo are read",
                path=str(source),
            )
        logger.debug("averaging %d channels of %s to mono", data.shape[1], source)
        samples = data.astype(np.float64).mean(axis=1) / PCM16_SCALE
    else:
        samples = data.astype(np.float64) / PCM16_SCALE
    return Waveform(samples.astype(np.float32), int(rate))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(wave: Waveform, path: str | Path) -> None:
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(out, wave.sample_rate, to_pcm16(wave.samples))
    except OSError as exc:
        raise FileIoError(f"could not write {out}: {exc}", path=str(out)) from exc


@lru_cache(maxsize=32)
def resample_filter(up: int, down: int, taps: int = RESAMPLE_TAPS) -> np.ndarray:
    max_rate = max(up, down)
    numtaps = taps * max_rate + 1
    return signal.firwin(numtaps, 1.0 / max_rate, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(wave: Waveform, target_rate: int, *, taps: int = RESAMPLE_TAPS) -> Waveform:
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be positive, got {target_rate}", field="target_rate")
    if target_rate == wave.sample_rate:
        return wave
    divisor = math.gcd(int(target_rate), wave.sample_rate)
    up = int(target_rate) // divisor
    down = wave.sample_rate // divisor
    taps_h = resample_filter(up, down, taps)
    out = signal.resample_poly(wave.samples.astype(np.float64), up, down, window=taps_h)
    # filter ringing can overshoot full scale
    out = np.clip(out, -1.0, 1.0)
    return Waveform(out.astype(np.float32), int(target_rate))


def sample_count(duration_s: float, rate: int) -> int:
    return int(round(duration_s * rate))


def synth(
    kind: SynthKind,
    duration_s: float,
    rate: int,
    *,
    freq: float = 440.0,
    seed: int = 0,
    amplitude: float = 1.0,
) -> Waveform:
    if duration_s <= 0:
        raise ConfigError(f"duration_s must be positive, got {duration_s}", field="duration_s")
    if not 0.0 <= amplitude <= 1.0:
        raise ConfigError(f"amplitude must lie in [0, 1], got {amplitude}", field="amplitude")
    n = sample_count(duration_s, rate)
    if kind == "silence":
        samples = np.zeros(n, dtype=np.float32)
    elif kind == "sine":
        t = np.arange(n, dtype=np.float64) / rate
        samples = (amplitude * np.sin(2.0 * np.pi * freq * t)).astype(np.float32)
    elif kind == "noise":
        rng = make_rng(seed)
        samples = (amplitude * rng.uniform(-1.0, 1.0, n)).astype(np.float32)
    else:
        raise ConfigError(f"unknown synth kind {kind!r}", field="kind")
    return Waveform(samples, rate)
