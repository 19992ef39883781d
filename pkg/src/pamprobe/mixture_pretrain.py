"""Weighted cross-domain pretraining of the toy embedder.

Pipeline per step: draw a batch from the weighted source stream, scale the
cached peak-normalised mel energies by a random gain, MixUp, PCEN and
time-mean pooling, then an MLP trunk, a linear embedding layer and one
linear classifier per head. The frontend is fixed; gradients start at the
pooled features.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .audio_io import Waveform, resample
from .corpus import DatasetRegistry, LabeledClip, filter_ambient
from .dsp_frontend import (
    MelConfig,
    PcenConfig,
    frontend_preset,
    mel_energies,
    pcen_transform,
    window_clip,
)
from .embedder import AudioLoader, EmbedderSpec, wav_loader
from .errors import ConfigError, DivergenceError, FileIoError, NotFoundError
from .io import json_dump, load_json, validate_payload
from .probe import Adam, log_softmax, softmax
from .seeds import derived_rng
from .settings import resolve_workers

logger = logging.getLogger(__name__)

PRIMARY_HEAD = "primary"
TAXONOMY_KEYS: tuple[str, ...] = ("genus", "family", "order")
TAXONOMY_LOSS_WEIGHT = 0.1
SELECT_CHUNK = 4096
STATS_CHUNK = 64


@dataclass(frozen=True, slots=True)
class AugmentConfig:
    gain_min: float = 0.15
    gain_max: float = 0.25
    mixup_p: float = 0.75
    mixup_alpha: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.gain_min <= self.gain_max:
            raise ConfigError(
                f"need 0 < gain_min <= gain_max, got {self.gain_min} / {self.gain_max}",
                field="gain_min",
            )
        if not 0.0 <= self.mixup_p <= 1.0:
            raise ConfigError(f"mixup_p must lie in [0, 1], got {self.mixup_p}", field="mixup_p")
        if self.mixup_alpha is not None and self.mixup_alpha <= 0:
            raise ConfigError(f"mixup_alpha must be positive, got {self.mixup_alpha}", field="mixup_alpha")

    @property
    def midpoint_gain(self) -> float:
        return 0.5 * (self.gain_min + self.gain_max)


@dataclass(frozen=True, slots=True)
class MixtureSource:
    group: str
    weight: float
    datasets: tuple[str, ...]
    strip_label: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if not 0.0 < self.weight <= 1.0:
            raise ConfigError(
                f"source {self.group!r}: weight must lie in (0, 1], got {self.weight}", field="weight"
            )
        if not self.datasets:
            raise ConfigError(f"source {self.group!r} names no datasets", field="datasets")


@dataclass(frozen=True, slots=True)
class MixtureConfig:
    sources: tuple[MixtureSource, ...]
    batch_size: int = 32
    steps: int = 2000
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        sources = tuple(self.sources)
        object.__setattr__(self, "sources", sources)
        if not sources:
            raise ConfigError("a mixture needs at least one source", field="sources")
        groups = [source.group for source in sources]
        if len(set(groups)) != len(groups):
            raise ConfigError(f"duplicate source groups in {groups}", field="sources")
        total = sum(source.weight for source in sources)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"source weights sum to {total}, expected 1", field="weight")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", field="batch_size")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}", field="steps")

    @property
    def groups(self) -> list[str]:
        return [source.group for source in self.sources]

    @property
    def weights(self) -> np.ndarray:
        return np.array([source.weight for source in self.sources], dtype=np.float64)

    @property
    def dataset_ids(self) -> list[str]:
        return [dataset for source in self.sources for dataset in source.datasets]

    @classmethod
    def single(cls, group: str, datasets: Iterable[str], **options: Any) -> MixtureConfig:
        return cls((MixtureSource(group, 1.0, tuple(datasets)),), **options)

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> MixtureConfig:
        validate_payload(payload, "mixture")
        sources = tuple(
            MixtureSource(
                item["group"], float(item["weight"]), tuple(item["datasets"]), item.get("strip_label")
            )
            for item in payload["sources"]
        )
        options: dict[str, Any] = {}
        if "batch_size" in payload:
            options["batch_size"] = int(payload["batch_size"])
        if "steps" in payload:
            options["steps"] = int(payload["steps"])
        if "augment" in payload:
            options["augment"] = AugmentConfig(**payload["augment"])
        return cls(sources, **options)

    def to_payload(self) -> dict[str, Any]:
        return {
            "sources": [
                {
                    "group": source.group,
                    "weight": source.weight,
                    "datasets": list(source.datasets),
                    "strip_label": source.strip_label,
                }
                for source in self.sources
            ],
            "batch_size": self.batch_size,
            "steps": self.steps,
            "augment": asdict(self.augment),
        }

    @classmethod
    def load(cls, path: str | Path) -> MixtureConfig:
        return cls.from_payload(load_json(path))

    def without_dataset(self, dataset_id: str) -> MixtureConfig:
        """Drop one dataset; sources left empty are dropped and weights renormalised."""
        kept = []
        for source in self.sources:
            datasets = tuple(d for d in source.datasets if d != dataset_id)
            if datasets:
                kept.append(replace(source, datasets=datasets))
        if not kept:
            raise ConfigError(f"removing {dataset_id!r} leaves the mixture empty", field="sources")
        total = sum(source.weight for source in kept)
        kept = [replace(source, weight=source.weight / total) for source in kept]
        return replace(self, sources=tuple(kept))


@dataclass(frozen=True, slots=True)
class HeadSpec:
    name: str
    classes: tuple[str, ...]
    loss_weight: float = 1.0
    label_key: str = "primary"
    group: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.loss_weight <= 0:
            raise ConfigError(
                f"head {self.name!r}: loss_weight must be positive, got {self.loss_weight}",
                field="loss_weight",
            )
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"head {self.name!r} lists a class twice", field="classes")

    def target_index(self, clip: LabeledClip, group: str) -> int | None:
        if self.group is not None and self.group != group:
            return None
        label = clip.label_for(self.label_key)
        if label is None or label not in self.classes:
            return None
        return self.classes.index(label)


class Draw(NamedTuple):
    group: str
    clip: LabeledClip


def clip_key(clip: LabeledClip) -> tuple[str, str]:
    return clip.dataset_id, clip.clip_id


def mixture_clips(
    mixture: MixtureConfig, registry: DatasetRegistry
) -> dict[str, list[LabeledClip]]:
    """Ambient-filtered (and label-stripped) training clips per source group."""
    out: dict[str, list[LabeledClip]] = {}
    for source in mixture.sources:
        clips = filter_ambient(registry.all_clips(source.datasets))
        if source.strip_label is not None:
            clips = strip_labeled(clips, source.strip_label)
        if not clips:
            raise ConfigError(f"source {source.group!r} has no clips after filtering", field="sources")
        out[source.group] = clips
    return out


def build_heads(
    mixture: MixtureConfig,
    registry: DatasetRegistry,
    *,
    taxonomy_keys: Sequence[str] = TAXONOMY_KEYS,
    taxonomy_weight: float = TAXONOMY_LOSS_WEIGHT,
) -> list[HeadSpec]:
    """Shared primary head, one secondary head per source group, taxonomy heads.

    A group's secondary head doubles as its species head at full weight.
    """
    sources = mixture_clips(mixture, registry)
    primary = sorted({clip.primary for clips in sources.values() for clip in clips})
    heads = [HeadSpec(PRIMARY_HEAD, tuple(primary))]
    for group, clips in sources.items():
        secondary = sorted({clip.secondary for clip in clips if clip.secondary is not None})
        if secondary:
            heads.append(HeadSpec(f"{group}:secondary", tuple(secondary), 1.0, "secondary", group))
        for key in taxonomy_keys:
            names = sorted({clip.taxonomy[key] for clip in clips if key in clip.taxonomy})
            if names:
                heads.append(HeadSpec(f"{group}:{key}", tuple(names), taxonomy_weight, key, group))
    return heads


def exclude_holdout_classes(
    heads: Sequence[HeadSpec], holdout: str, registry: DatasetRegistry
) -> list[HeadSpec]:
    """Remove classes that occur in the holdout dataset and nowhere else."""
    holdout_clips = registry.clips(holdout)
    others = registry.without(holdout).all_clips()
    out: list[HeadSpec] = []
    for head in heads:
        held = {clip.label_for(head.label_key) for clip in holdout_clips}
        shared = {clip.label_for(head.label_key) for clip in others}
        kept = tuple(name for name in head.classes if name not in held or name in shared)
        if len(kept) < len(head.classes):
            logger.info(
                "head %s: dropped %d classes exclusive to %s",
                head.name, len(head.classes) - len(kept), holdout,
            )
        if kept:
            out.append(replace(head, classes=kept))
    return out


def strip_labeled(clips: Iterable[LabeledClip], label: str = "bird") -> list[LabeledClip]:
    return [clip for clip in clips if clip.secondary != label]


def sample_stream(
    mixture: MixtureConfig, sources: Mapping[str, Sequence[LabeledClip]], seed: int
) -> Iterator[Draw]:
    """Endless weighted draws; each source cycles through seeded shuffled passes."""
    groups = mixture.groups
    for group in groups:
        if not sources.get(group):
            raise ConfigError(f"source {group!r} is empty", field="sources")
    ordered = {
        group: sorted(sources[group], key=lambda clip: (clip.dataset_id, clip.clip_id))
        for group in groups
    }
    cumulative = np.cumsum(mixture.weights)
    cumulative[-1] = 1.0
    selector = derived_rng(seed, "select")
    passes = dict.fromkeys(groups, 0)
    cursors = dict.fromkeys(groups, 0)
    orders = {
        group: derived_rng(seed, group, 0).permutation(len(ordered[group])) for group in groups
    }
    last = len(groups) - 1
    while True:
        for draw in selector.random(SELECT_CHUNK):
            group = groups[min(int(np.searchsorted(cumulative, draw, side="right")), last)]
            if cursors[group] == len(ordered[group]):
                passes[group] += 1
                cursors[group] = 0
                orders[group] = derived_rng(seed, group, passes[group]).permutation(
                    len(ordered[group])
                )
            clip = ordered[group][orders[group][cursors[group]]]
            cursors[group] += 1
            yield Draw(group, clip)


def augment_gain(
    wave: Waveform,
    rng: np.random.Generator,
    gain_min: float = 0.15,
    gain_max: float = 0.25,
) -> Waveform:
    """Peak-normalise, then scale to a random peak in [gain_min, gain_max]."""
    peak = wave.peak
    if peak == 0.0:
        return wave
    gain = rng.uniform(gain_min, gain_max)
    scaled = wave.samples.astype(np.float64) * (gain / peak)
    return Waveform(np.clip(scaled, -1.0, 1.0), wave.sample_rate)


def draw_gains(rng: np.random.Generator, n: int, augment: AugmentConfig) -> np.ndarray:
    return rng.uniform(augment.gain_min, augment.gain_max, n)


@dataclass(slots=True)
class MixupBatch:
    features: np.ndarray
    targets: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    partners: np.ndarray
    lambdas: np.ndarray
    no_partner: int = 0

    @property
    def mixed(self) -> np.ndarray:
        return self.partners >= 0


def mix_examples(
    features: np.ndarray,
    targets: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    partners: np.ndarray,
    lambdas: np.ndarray,
) -> MixupBatch:
    """Mix row i with row partners[i] (skipped where partners[i] < 0).

    A head target present on one side only is taken from that side.
    """
    features = np.asarray(features, dtype=np.float64)
    rows = np.flatnonzero(partners >= 0)
    other = partners[rows]
    lam = lambdas[rows]
    out_x = features.copy()
    shape = (-1,) + (1,) * (features.ndim - 1)
    out_x[rows] = lam.reshape(shape) * features[rows] + (1.0 - lam).reshape(shape) * features[other]
    out_targets: dict[str, np.ndarray] = {}
    out_masks: dict[str, np.ndarray] = {}
    for name, target in targets.items():
        target = np.asarray(target, dtype=np.float64)
        mask = np.asarray(masks[name], dtype=bool)
        mixed_t = target.copy()
        mixed_m = mask.copy()
        own = mask[rows]
        theirs = mask[other]
        both = own & theirs
        blend = lam[both, None] * target[rows[both]] + (1.0 - lam[both, None]) * target[other[both]]
        mixed_t[rows[both]] = blend
        borrow = ~own & theirs
        mixed_t[rows[borrow]] = target[other[borrow]]
        mixed_m[rows[borrow]] = True
        out_targets[name] = mixed_t
        out_masks[name] = mixed_m
    return MixupBatch(out_x, out_targets, out_masks, partners, lambdas)


def mixup(
    features: np.ndarray,
    targets: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    p: float,
    rng: np.random.Generator,
    alpha: float | None = None,
) -> MixupBatch:
    """Mix each example with probability ``p`` into a partner drawn uniformly from the batch.

    The partner may be the example itself, which leaves it unchanged.
    """
    n = features.shape[0]
    if n < 2:
        partners = np.full(n, -1)
        batch = mix_examples(features, targets, masks, partners, np.ones(n))
        if n == 1 and p > 0:
            batch.no_partner = 1
            logger.debug("mixup skipped: a batch of one can only mix with itself")
        return batch
    chosen = rng.random(n) < p
    partners = rng.integers(0, n, n)
    lambdas = rng.uniform(0.0, 1.0, n) if alpha is None else rng.beta(alpha, alpha, n)
    partners = np.where(chosen, partners, -1)
    lambdas = np.where(chosen, lambdas, 1.0)
    return mix_examples(features, targets, masks, partners, lambdas)


@dataclass(slots=True)
class HeadLoss:
    total: float
    per_head: dict[str, float]
    grads: dict[str, np.ndarray]


def multi_head_loss(
    logits: Mapping[str, np.ndarray],
    targets: Mapping[str, np.ndarray],
    heads: Sequence[HeadSpec],
    masks: Mapping[str, np.ndarray] | None = None,
) -> HeadLoss:
    """Weighted sum of per-head cross entropies and their logit gradients.

    Every head divides by the full batch size; rows masked out of a head add
    nothing to its loss or gradient.
    """
    total = 0.0
    per_head: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    for head in heads:
        try:
            z = np.asarray(logits[head.name], dtype=np.float64)
            y = np.asarray(targets[head.name], dtype=np.float64)
        except KeyError as exc:
            raise ConfigError(f"no logits or targets for head {head.name!r}", field=head.name) from exc
        width = len(head.classes)
        if z.ndim != 2 or z.shape[1] != width or y.shape != z.shape:
            raise ConfigError(
                f"head {head.name!r}: logits {z.shape} / targets {y.shape} do not fit {width} classes",
                field=head.name,
            )
        mask = np.ones(z.shape[0], dtype=bool) if masks is None else np.asarray(masks[head.name], bool)
        batch = z.shape[0]
        grad = np.zeros_like(z)
        if batch == 0 or not mask.any():
            per_head[head.name] = 0.0
            grads[head.name] = grad
            continue
        ce = float(-np.sum(y[mask] * log_softmax(z[mask])) / batch)
        grad[mask] = head.loss_weight * (softmax(z[mask]) - y[mask]) / batch
        per_head[head.name] = ce
        grads[head.name] = grad
        total += head.loss_weight * ce
    return HeadLoss(total, per_head, grads)


def head_targets(
    draws: Sequence[Draw], heads: Sequence[HeadSpec]
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    targets: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for head in heads:
        target = np.zeros((len(draws), len(head.classes)))
        mask = np.zeros(len(draws), dtype=bool)
        for row, (group, clip) in enumerate(draws):
            index = head.target_index(clip, group)
            if index is not None:
                target[row, index] = 1.0
                mask[row] = True
        targets[head.name] = target
        masks[head.name] = mask
    return targets, masks


@dataclass(frozen=True, slots=True)
class ToyArchitecture:
    name: str
    width: int
    depth: int
    embedding_dim: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.depth < 0 or self.embedding_dim < 1:
            raise ConfigError(f"invalid architecture {self}", field="arch")


ARCHITECTURES: dict[str, ToyArchitecture] = {
    "t0": ToyArchitecture("t0", 128, 1, 64),
    "t1": ToyArchitecture("t1", 256, 2, 128),
    "t2": ToyArchitecture("t2", 512, 2, 256),
}


def architecture(name: str) -> ToyArchitecture:
    try:
        return ARCHITECTURES[name]
    except KeyError as exc:
        known = ", ".join(sorted(ARCHITECTURES))
        raise ConfigError(f"unknown architecture {name!r} (known: {known})", field="arch") from exc


@dataclass(frozen=True, slots=True)
class PretrainHparams:
    lr: float = 1e-3
    arch: str = "t1"
    sample_rate: int = 32_000
    window_s: float = 5.0
    frontend: str = "default"
    log_every: int = 200

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", field="lr")
        if self.window_s <= 0:
            raise ConfigError(f"window_s must be positive, got {self.window_s}", field="window_s")
        architecture(self.arch)
        frontend_preset(self.frontend).mel.validate_rate(self.sample_rate)


def clip_energies(wave: Waveform, hparams: PretrainHparams, mel_cfg: MelConfig) -> np.ndarray:
    """Mel energies of the repeat-padded, peak-normalised training window."""
    wave = resample(wave, hparams.sample_rate)
    (window,) = window_clip(wave, "repeat_pad", hparams.window_s)
    peak = window.peak
    if peak > 0:
        window = Waveform(np.clip(window.samples / peak, -1.0, 1.0), window.sample_rate)
    return mel_energies(window, mel_cfg).values.astype(np.float32)


@dataclass(slots=True)
class FeatureBank:
    """Peak-normalised mel energies per (dataset, clip); a gain g scales them by g**2."""

    energies: dict[tuple[str, str], np.ndarray]
    hparams: PretrainHparams

    def stack(self, clips: Sequence[LabeledClip]) -> np.ndarray:
        try:
            return np.stack([self.energies[clip_key(clip)] for clip in clips]).astype(np.float64)
        except KeyError as exc:
            raise NotFoundError(f"no cached energies for clip {exc.args[0]!r}") from exc


def build_feature_bank(
    clips: Iterable[LabeledClip],
    hparams: PretrainHparams,
    *,
    loader: AudioLoader | None = None,
    workers: int | None = None,
) -> FeatureBank:
    load = loader or wav_loader()
    mel_cfg = frontend_preset(hparams.frontend).mel
    unique = {clip_key(clip): clip for clip in clips}

    def compute(clip: LabeledClip) -> np.ndarray:
        return clip_energies(load(clip), hparams, mel_cfg)

    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        grids = list(pool.map(compute, unique.values()))
    logger.info("feature bank: %d clips", len(grids))
    return FeatureBank(dict(zip(unique, grids, strict=True)), hparams)


def pcen_pool(energies: np.ndarray, pcen_cfg: PcenConfig, *, log_pre: bool = False) -> np.ndarray:
    """PCEN per (example, band), then mean over time; (B, T, F) -> (B, F)."""
    grid = np.asarray(energies, dtype=np.float64)
    if log_pre:
        grid = np.log1p(grid)
    batch, steps, bands = grid.shape
    flat = grid.transpose(1, 0, 2).reshape(steps, batch * bands)
    out = pcen_transform(flat, pcen_cfg)
    return out.reshape(steps, batch, bands).mean(axis=0)


@dataclass(slots=True)
class ForwardCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    embedding: np.ndarray


class ToyEmbedderModel:
    """PCEN-pooled features -> ReLU MLP -> linear embedding -> per-head linear logits."""

    def __init__(
        self,
        arch: ToyArchitecture,
        heads: Sequence[HeadSpec],
        params: dict[str, np.ndarray],
        *,
        hparams: PretrainHparams,
        feature_mean: np.ndarray,
        feature_std: np.ndarray,
        inference_gain: float,
        name: str = "toy",
    ) -> None:
        self.arch = arch
        self.heads = tuple(heads)
        self.params = params
        self.hparams = hparams
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.inference_gain = float(inference_gain)
        self.name = name
        preset = frontend_preset(hparams.frontend)
        self.mel_cfg = preset.mel
        self.pcen_cfg = preset.pcen
        self.history: list[float] = []

    @classmethod
    def initialize(
        cls,
        heads: Sequence[HeadSpec],
        hparams: PretrainHparams,
        seed: int,
        *,
        inference_gain: float = AugmentConfig().midpoint_gain,
    ) -> ToyEmbedderModel:
        arch = architecture(hparams.arch)
        n_features = frontend_preset(hparams.frontend).mel.n_mels
        rng = derived_rng(seed, "toy-init")
        params: dict[str, np.ndarray] = {}
        fan_in = n_features
        for layer in range(arch.depth):
            params[f"hidden{layer}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, arch.width))
            params[f"hidden{layer}.b"] = np.zeros(arch.width)
            fan_in = arch.width
        params["embedding.W"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, arch.embedding_dim))
        params["embedding.b"] = np.zeros(arch.embedding_dim)
        for head in heads:
            params[f"head:{head.name}.W"] = rng.normal(
                0.0, np.sqrt(1.0 / arch.embedding_dim), (arch.embedding_dim, len(head.classes))
            )
            params[f"head:{head.name}.b"] = np.zeros(len(head.classes))
        return cls(
            arch,
            heads,
            params,
            hparams=hparams,
            feature_mean=np.zeros(n_features),
            feature_std=np.ones(n_features),
            inference_gain=inference_gain,
        )

    @property
    def spec(self) -> EmbedderSpec:
        return EmbedderSpec(
            self.name,
            self.hparams.sample_rate,
            self.hparams.window_s,
            self.arch.embedding_dim,
            short_clip_policy="repeat_pad",
        )

    def fit_standardizer(self, pooled: np.ndarray) -> None:
        self.feature_mean = pooled.mean(axis=0)
        self.feature_std = np.maximum(pooled.std(axis=0), 1e-3)

    def pooled_features(self, energies: np.ndarray, gains: np.ndarray | float) -> np.ndarray:
        scale = np.square(np.broadcast_to(np.asarray(gains, dtype=np.float64), energies.shape[:1]))
        return pcen_pool(
            energies * scale[:, None, None], self.pcen_cfg, log_pre=self.mel_cfg.log_pre
        )

    def forward(self, features: np.ndarray) -> tuple[dict[str, np.ndarray], ForwardCache]:
        h = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std
        inputs: list[np.ndarray] = []
        pre: list[np.ndarray] = []
        for layer in range(self.arch.depth):
            inputs.append(h)
            a = h @ self.params[f"hidden{layer}.W"] + self.params[f"hidden{layer}.b"]
            pre.append(a)
            h = np.maximum(a, 0.0)
        inputs.append(h)
        embedding = h @ self.params["embedding.W"] + self.params["embedding.b"]
        logits = {
            head.name: embedding @ self.params[f"head:{head.name}.W"]
            + self.params[f"head:{head.name}.b"]
            for head in self.heads
        }
        return logits, ForwardCache(inputs, pre, embedding)

    def backward(self, cache: ForwardCache, dlogits: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        d_embedding = np.zeros_like(cache.embedding)
        for head in self.heads:
            dz = dlogits[head.name]
            grads[f"head:{head.name}.W"] = cache.embedding.T @ dz
            grads[f"head:{head.name}.b"] = dz.sum(axis=0)
            d_embedding += dz @ self.params[f"head:{head.name}.W"].T
        grads["embedding.W"] = cache.inputs[-1].T @ d_embedding
        grads["embedding.b"] = d_embedding.sum(axis=0)
        dh = d_embedding @ self.params["embedding.W"].T
        for layer in reversed(range(self.arch.depth)):
            da = dh * (cache.pre_activations[layer] > 0)
            grads[f"hidden{layer}.W"] = cache.inputs[layer].T @ da
            grads[f"hidden{layer}.b"] = da.sum(axis=0)
            dh = da @ self.params[f"hidden{layer}.W"].T
        return {name: grads[name] for name in self.params}

    def loss_and_grads(
        self,
        features: np.ndarray,
        targets: Mapping[str, np.ndarray],
        masks: Mapping[str, np.ndarray] | None = None,
    ) -> tuple[HeadLoss, dict[str, np.ndarray]]:
        logits, cache = self.forward(features)
        loss = multi_head_loss(logits, targets, self.heads, masks)
        return loss, self.backward(cache, loss.grads)

    def embed_features(self, features: np.ndarray) -> np.ndarray:
        return self.forward(features)[1].embedding

    def embed_batch(self, windows: Sequence[Waveform]) -> np.ndarray:
        if not windows:
            return np.zeros((0, self.arch.embedding_dim))
        energies = np.stack(
            [clip_energies(window, self.hparams, self.mel_cfg) for window in windows]
        ).astype(np.float64)
        return self.embed_features(self.pooled_features(energies, self.inference_gain))

    def save(self, path: str | Path) -> Path:
        """Write ``<path>.json`` (architecture, heads, frontend) and ``<path>.npz`` (weights)."""
        target = Path(path).with_suffix(".json")
        weights = target.with_suffix(".npz")
        json_dump(
            target,
            {
                "name": self.name,
                "arch": asdict(self.arch),
                "hparams": asdict(self.hparams),
                "heads": [asdict(head) for head in self.heads],
                "inference_gain": self.inference_gain,
                "weights": weights.name,
            },
        )
        try:
            np.savez(
                weights,
                __feature_mean=self.feature_mean,
                __feature_std=self.feature_std,
                **self.params,
            )
        except OSError as exc:
            raise FileIoError(f"could not write {weights}: {exc}", path=str(weights)) from exc
        return target

    @classmethod
    def load(cls, path: str | Path) -> ToyEmbedderModel:
        source = Path(path).with_suffix(".json")
        payload = load_json(source)
        weights = source.with_name(payload["weights"])
        try:
            with np.load(weights) as archive:
                arrays = {name: archive[name] for name in archive.files}
        except OSError as exc:
            raise FileIoError(f"could not read {weights}: {exc}", path=str(weights)) from exc
        heads = [
            HeadSpec(
                item["name"], tuple(item["classes"]), item["loss_weight"], item["label_key"],
                item["group"],
            )
            for item in payload["heads"]
        ]
        mean = arrays.pop("__feature_mean")
        std = arrays.pop("__feature_std")
        arch = ToyArchitecture(**payload["arch"])
        return cls(
            arch,
            heads,
            arrays,
            hparams=PretrainHparams(**payload["hparams"]),
            feature_mean=mean,
            feature_std=std,
            inference_gain=payload["inference_gain"],
            name=payload["name"],
        )


def labeled_draws(sources: Mapping[str, Sequence[LabeledClip]]) -> list[Draw]:
    return [Draw(group, clip) for group, clips in sources.items() for clip in clips]


def clean_loss(model: ToyEmbedderModel, bank: FeatureBank, draws: Sequence[Draw]) -> float:
    """Mean weighted loss without augmentation, at the inference gain."""
    total = 0.0
    for start in range(0, len(draws), STATS_CHUNK):
        chunk = draws[start : start + STATS_CHUNK]
        features = model.pooled_features(bank.stack([draw.clip for draw in chunk]), model.inference_gain)
        targets, masks = head_targets(chunk, model.heads)
        logits, _ = model.forward(features)
        total += multi_head_loss(logits, targets, model.heads, masks).total * len(chunk)
    return total / max(1, len(draws))


def pretrain_toy(
    mixture: MixtureConfig,
    registry: DatasetRegistry,
    heads: Sequence[HeadSpec],
    hparams: PretrainHparams | None = None,
    seed: int = 0,
    *,
    loader: AudioLoader | None = None,
    bank: FeatureBank | None = None,
    workers: int | None = None,
) -> ToyEmbedderModel:
    hparams = hparams or PretrainHparams()
    if not heads:
        raise ConfigError("pretraining needs at least one head", field="heads")
    sources = mixture_clips(mixture, registry)
    if bank is None:
        clips = [clip for group_clips in sources.values() for clip in group_clips]
        bank = build_feature_bank(clips, hparams, loader=loader, workers=workers)
    augment = mixture.augment
    model = ToyEmbedderModel.initialize(
        heads, hparams, seed, inference_gain=augment.midpoint_gain
    )
    draws = labeled_draws(sources)
    pooled = np.concatenate(
        [
            model.pooled_features(
                bank.stack([draw.clip for draw in draws[start : start + STATS_CHUNK]]),
                augment.midpoint_gain,
            )
            for start in range(0, len(draws), STATS_CHUNK)
        ]
    )
    model.fit_standardizer(pooled)

    stream = sample_stream(mixture, sources, seed)
    rng = derived_rng(seed, "augment")
    names = list(model.params)
    adam = Adam([model.params[name].shape for name in names], np.float64)
    for step in range(mixture.steps):
        batch = [next(stream) for _ in range(mixture.batch_size)]
        energies = bank.stack([draw.clip for draw in batch])
        energies *= np.square(draw_gains(rng, len(batch), augment))[:, None, None]
        targets, masks = head_targets(batch, model.heads)
        mixed = mixup(energies, targets, masks, augment.mixup_p, rng, augment.mixup_alpha)
        features = pcen_pool(mixed.features, model.pcen_cfg, log_pre=model.mel_cfg.log_pre)
        loss, grads = model.loss_and_grads(features, mixed.targets, mixed.masks)
        if not np.isfinite(loss.total):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}", step=step)
        adam.step([model.params[name] for name in names], [grads[name] for name in names], hparams.lr)
        model.history.append(loss.total)
        if hparams.log_every and (step + 1) % hparams.log_every == 0:
            logger.info("pretrain step %d/%d loss %.4f", step + 1, mixture.steps, loss.total)
    return model
