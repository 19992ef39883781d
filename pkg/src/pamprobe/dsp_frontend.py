"""STFT, mel projection, PCEN and clip windowing."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .audio_io import Waveform
from .errors import ConfigError, EmptyInputError

logger = logging.getLogger(__name__)

ClipPolicy = Literal["zero_pad_tail", "split_and_collect", "repeat_pad"]
CLIP_POLICIES: tuple[str, ...] = ("zero_pad_tail", "split_and_collect", "repeat_pad")
SmootherInit = Literal["first", "zero"]


@dataclass(frozen=True, slots=True)
class MelConfig:
    frame_length_s: float = 0.025
    hop_length_s: float = 0.010
    n_mels: int = 128
    fmin: float = 60.0
    fmax: float = 10_000.0
    window: str = "hann"
    log_pre: bool = False

    def __post_init__(self) -> None:
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}", field="n_mels")
        if not 0.0 < self.fmin < self.fmax:
            raise ConfigError(
                f"need 0 < fmin < fmax, got fmin={self.fmin} fmax={self.fmax}", field="fmin"
            )
        if self.frame_length_s <= 0 or self.hop_length_s <= 0:
            raise ConfigError("frame and hop lengths must be positive", field="frame_length_s")
        if self.hop_length_s > self.frame_length_s:
            raise ConfigError("hop must not exceed frame length", field="hop_length_s")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}", field="window")

    def validate_rate(self, rate: int) -> None:
        if self.fmax > rate / 2:
            raise ConfigError(
                f"fmax {self.fmax} Hz exceeds Nyquist {rate / 2} Hz", field="fmax"
            )

    def frame_length(self, rate: int) -> int:
        return max(1, int(round(self.frame_length_s * rate)))

    def hop_length(self, rate: int) -> int:
        return max(1, int(round(self.hop_length_s * rate)))

    def n_fft(self, rate: int) -> int:
        return 1 << (self.frame_length(rate) - 1).bit_length()


@dataclass(frozen=True, slots=True)
class PcenConfig:
    smoothing: float = 0.1
    gain: float = 0.5
    bias: float = 2.0
    root: float = 2.0
    eps: float = 1e-6
    spcen: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.smoothing <= 1.0:
            raise ConfigError(f"smoothing must lie in (0, 1], got {self.smoothing}", field="smoothing")
        if self.gain < 0:
            raise ConfigError(f"gain must be >= 0, got {self.gain}", field="gain")
        if self.bias < 0:
            raise ConfigError(f"bias must be >= 0, got {self.bias}", field="bias")
        if self.root <= 0:
            raise ConfigError(f"root must be > 0, got {self.root}", field="root")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}", field="eps")
        if self.spcen:
            raise ConfigError("spectral PCEN is not implemented", field="spcen")


@dataclass(frozen=True, slots=True)
class FrontendPreset:
    name: str
    mel: MelConfig
    pcen: PcenConfig


FRONTEND_PRESETS: dict[str, FrontendPreset] = {
    "default": FrontendPreset("default", MelConfig(), PcenConfig()),
    "surfperch": FrontendPreset(
        "surfperch",
        MelConfig(fmin=50.0, fmax=16_000.0),
        PcenConfig(smoothing=0.145, gain=0.8, bias=10.0, root=4.0),
    ),
}


def frontend_preset(name: str) -> FrontendPreset:
    try:
        return FRONTEND_PRESETS[name]
    except KeyError as exc:
        known = ", ".join(sorted(FRONTEND_PRESETS))
        raise ConfigError(f"unknown frontend preset {name!r} (known: {known})", field="frontend") from exc


@dataclass(frozen=True, slots=True, eq=False)
class MelSpectrogram:
    values: np.ndarray
    sample_rate: int
    hop_length: int
    frame_length: int
    stage: Literal["mel", "log_mel", "pcen"] = "mel"

    def __post_init__(self) -> None:
        grid = np.asarray(self.values, dtype=np.float64)
        if grid.ndim != 2:
            raise ConfigError(f"spectrogram must be time x mel, got shape {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise ConfigError("spectrogram contains non-finite values")
        if self.stage == "mel" and grid.size and float(grid.min()) < 0:
            raise ConfigError("mel energies must be nonnegative")
        grid.setflags(write=False)
        object.__setattr__(self, "values", grid)

    @property
    def time_steps(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.values.shape[1])

    def frame_times(self) -> np.ndarray:
        """Start time in seconds of each frame."""
        return np.arange(self.time_steps) * self.hop_length / self.sample_rate


def frame_count(n_samples: int, frame: int, hop: int) -> int:
    if n_samples < frame:
        return 0
    return (n_samples - frame) // hop + 1


@lru_cache(maxsize=16)
def _analysis_window(frame: int) -> np.ndarray:
    # periodic Hann, so a bin-centred tone leaks into exactly its two neighbours
    return signal.get_window("hann", frame, fftbins=True)


def stft_power(wave: Waveform, mel_cfg: MelConfig) -> np.ndarray:
    """|FFT|^2 of Hann-windowed frames; shape (frames, n_fft // 2 + 1)."""
    rate = wave.sample_rate
    frame = mel_cfg.frame_length(rate)
    hop = mel_cfg.hop_length(rate)
    if len(wave) < frame:
        raise EmptyInputError(
            f"waveform of {len(wave)} samples is shorter than one {frame}-sample frame"
        )
    frames = sliding_window_view(wave.samples.astype(np.float64), frame)[::hop]
    spectrum = np.fft.rfft(frames * _analysis_window(frame), n=mel_cfg.n_fft(rate), axis=1)
    return np.abs(spectrum) ** 2


@lru_cache(maxsize=16)
def mel_filterbank(mel_cfg: MelConfig, rate: int) -> np.ndarray:
    """Triangular filters (n_mels, n_fft // 2 + 1), HTK mel scale, unnormalised.

    Unnormalised triangles sum to one between the first and last centre.
    """
    mel_cfg.validate_rate(rate)
    with warnings.catch_warnings():
        # narrow low bands may fall between FFT bins at fine mel resolution
        warnings.simplefilter("ignore", UserWarning)
        weights = librosa.filters.mel(
            sr=rate,
            n_fft=mel_cfg.n_fft(rate),
            n_mels=mel_cfg.n_mels,
            fmin=mel_cfg.fmin,
            fmax=mel_cfg.fmax,
            htk=True,
            norm=None,
            dtype=np.float64,
        )
    empty = int(np.sum(weights.sum(axis=1) == 0))
    if empty:
        logger.debug("%d of %d mel filters are empty at %d Hz", empty, mel_cfg.n_mels, rate)
    weights.setflags(write=False)
    return weights


def mel_center_frequencies(mel_cfg: MelConfig) -> np.ndarray:
    edges = librosa.mel_frequencies(
        n_mels=mel_cfg.n_mels + 2, fmin=mel_cfg.fmin, fmax=mel_cfg.fmax, htk=True
    )
    return edges[1:-1]


def mel_project(power: np.ndarray, mel_cfg: MelConfig, rate: int) -> MelSpectrogram:
    mel_cfg.validate_rate(rate)
    grid = np.asarray(power, dtype=np.float64)
    weights = mel_filterbank(mel_cfg, rate)
    if grid.ndim != 2 or grid.shape[1] != weights.shape[1]:
        raise ConfigError(
            f"power grid shape {grid.shape} does not match {weights.shape[1]} FFT bins"
        )
    energies = np.maximum(grid @ weights.T, 0.0)
    return MelSpectrogram(
        energies,
        sample_rate=rate,
        hop_length=mel_cfg.hop_length(rate),
        frame_length=mel_cfg.frame_length(rate),
    )


def log_compress(mel: MelSpectrogram) -> MelSpectrogram:
    return MelSpectrogram(
        np.log1p(mel.values),
        sample_rate=mel.sample_rate,
        hop_length=mel.hop_length,
        frame_length=mel.frame_length,
        stage="log_mel",
    )


def pcen_smoother(energies: np.ndarray, smoothing: float, init: SmootherInit = "first") -> np.ndarray:
    """M(t) = (1 - s) M(t-1) + s E(t), run independently per band (axis 1)."""
    grid = np.asarray(energies, dtype=np.float64)
    out = np.empty_like(grid)
    if grid.shape[0] == 0:
        return out
    out[0] = grid[0] if init == "first" else 0.0
    if grid.shape[0] > 1:
        zi = ((1.0 - smoothing) * out[0])[np.newaxis, :]
        out[1:], _ = signal.lfilter([smoothing], [1.0, smoothing - 1.0], grid[1:], axis=0, zi=zi)
    return out


def pcen_transform(
    energies: np.ndarray, cfg: PcenConfig, *, init: SmootherInit = "first"
) -> np.ndarray:
    """PCEN over a (time, channels) grid; channels may be any flattened band layout."""
    energies = np.asarray(energies, dtype=np.float64)
    smooth = pcen_smoother(energies, cfg.smoothing, init)
    normalized = energies / (cfg.eps + smooth) ** cfg.gain
    return (normalized + cfg.bias) ** cfg.root - cfg.bias**cfg.root


def pcen(mel: MelSpectrogram, cfg: PcenConfig, *, init: SmootherInit = "first") -> MelSpectrogram:
    energies = mel.values
    if energies.size and float(energies.min()) < 0:
        raise ConfigError("PCEN needs nonnegative energies")
    return MelSpectrogram(
        pcen_transform(energies, cfg, init=init),
        sample_rate=mel.sample_rate,
        hop_length=mel.hop_length,
        frame_length=mel.frame_length,
        stage="pcen",
    )


def mel_energies(wave: Waveform, mel_cfg: MelConfig) -> MelSpectrogram:
    return mel_project(stft_power(wave, mel_cfg), mel_cfg, wave.sample_rate)


def frontend(
    wave: Waveform,
    mel_cfg: MelConfig | None = None,
    pcen_cfg: PcenConfig | None = None,
) -> MelSpectrogram:
    mel_cfg = mel_cfg or MelConfig()
    pcen_cfg = pcen_cfg or PcenConfig()
    mel = mel_energies(wave, mel_cfg)
    if mel_cfg.log_pre:
        mel = log_compress(mel)
    return pcen(mel, pcen_cfg)


def window_clip(
    wave: Waveform,
    policy: ClipPolicy,
    target_len_s: float,
    rate: int | None = None,
) -> list[Waveform]:
    if len(wave) == 0:
        raise EmptyInputError("cannot window an empty waveform")
    if rate is not None and rate != wave.sample_rate:
        raise ConfigError(
            f"waveform is at {wave.sample_rate} Hz, windowing requested at {rate} Hz",
            field="rate",
        )
    if target_len_s <= 0:
        raise ConfigError(f"target length must be positive, got {target_len_s}", field="target_len_s")
    target = max(1, int(round(target_len_s * wave.sample_rate)))
    samples = wave.samples
    n = samples.shape[0]
    if n == target:
        return [wave]
    if policy == "zero_pad_tail":
        out = np.zeros(target, dtype=np.float32)
        keep = min(n, target)
        out[:keep] = samples[:keep]
        return [Waveform(out, wave.sample_rate)]
    if policy == "repeat_pad":
        reps = math.ceil(target / n)
        return [Waveform(np.tile(samples, reps)[:target], wave.sample_rate)]
    if policy == "split_and_collect":
        count = math.ceil(n / target)
        padded = np.zeros(count * target, dtype=np.float32)
        padded[:n] = samples
        return [Waveform(chunk, wave.sample_rate) for chunk in padded.reshape(count, target)]
    raise ConfigError(f"unknown clip policy {policy!r}", field="policy")
