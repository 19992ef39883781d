"""Deterministic synthetic corpora.

Clips are rendered on demand from small recipes, so tests and desk-scale
runs need no audio on disk; ``write_corpus`` materialises WAVs plus a
manifest for the CLI.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .audio_io import Waveform, sample_count, write_wav
from .corpus import AMBIENT, DatasetRegistry, LabeledClip, save_manifest
from .embedder import AudioLoader
from .errors import ConfigError, NotFoundError
from .seeds import hash64, make_rng

logger = logging.getLogger(__name__)

SoundKind = Literal["tone", "chirp", "harmonic", "noise"]

# Well inside 8 kHz so every class survives a 16 kHz pipeline.
TONE_FREQUENCIES: tuple[float, ...] = (350.0, 500.0, 700.0, 1000.0, 1400.0, 2000.0, 2800.0, 4000.0, 5600.0)
SHARED_CLASS = "shared_call"


@dataclass(frozen=True, slots=True)
class SoundClass:
    primary: str
    secondary: str | None
    kind: SoundKind
    freq: float = 0.0
    freq_end: float = 0.0
    taxonomy: Mapping[str, str] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.secondary if self.secondary is not None else self.primary


@dataclass(frozen=True, slots=True)
class ClipRecipe:
    kind: SoundKind
    freq: float
    freq_end: float
    seed: int
    duration_s: float
    rate: int
    noise_level: float = 0.02


@dataclass(slots=True)
class SyntheticCorpus:
    registry: DatasetRegistry
    recipes: dict[tuple[str, str], ClipRecipe]

    def loader(self) -> AudioLoader:
        def load(clip: LabeledClip) -> Waveform:
            try:
                recipe = self.recipes[(clip.dataset_id, clip.clip_id)]
            except KeyError as exc:
                raise NotFoundError(
                    f"no synthetic recipe for clip {clip.clip_id!r}", clip_id=clip.clip_id
                ) from exc
            return render(recipe)

        return load

    def merged(self, other: SyntheticCorpus) -> SyntheticCorpus:
        overlap = set(self.registry.datasets) & set(other.registry.datasets)
        if overlap:
            raise ConfigError(f"corpora share dataset ids {sorted(overlap)}", field="datasets")
        registry = DatasetRegistry({**self.registry.datasets, **other.registry.datasets})
        return SyntheticCorpus(registry, {**self.recipes, **other.recipes})


def render(recipe: ClipRecipe) -> Waveform:
    rng = make_rng(recipe.seed)
    n = sample_count(recipe.duration_s, recipe.rate)
    t = np.arange(n, dtype=np.float64) / recipe.rate
    amplitude = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    jitter = 1.0 + rng.uniform(-0.02, 0.02)
    if recipe.kind == "tone":
        signal = np.sin(2.0 * np.pi * recipe.freq * jitter * t + phase)
    elif recipe.kind == "chirp":
        span = recipe.duration_s
        f0, f1 = recipe.freq * jitter, recipe.freq_end * jitter
        signal = np.sin(2.0 * np.pi * (f0 * t + (f1 - f0) * t * t / (2.0 * span)) + phase)
    elif recipe.kind == "harmonic":
        signal = sum(np.sin(2.0 * np.pi * h * recipe.freq * jitter * t + h * phase) / h for h in (1, 2, 3))
        signal = signal / 1.84
    elif recipe.kind == "noise":
        signal = rng.uniform(-1.0, 1.0, n)
    else:
        raise ConfigError(f"unknown sound kind {recipe.kind!r}", field="kind")
    samples = amplitude * signal + recipe.noise_level * rng.standard_normal(n)
    return Waveform(np.clip(samples, -1.0, 1.0), recipe.rate)


def build_corpus(
    datasets: Mapping[str, Sequence[SoundClass]],
    *,
    clips_per_class: int = 42,
    ambient_per_dataset: int = 0,
    duration_s: float = 1.0,
    rate: int = 16_000,
    seed: int = 0,
) -> SyntheticCorpus:
    recipes: dict[tuple[str, str], ClipRecipe] = {}
    registry: dict[str, tuple[LabeledClip, ...]] = {}
    ambient = SoundClass(AMBIENT, None, "noise")
    for dataset_id, classes in datasets.items():
        clips: list[LabeledClip] = []
        plan = [(sound, clips_per_class) for sound in classes] + [(ambient, ambient_per_dataset)]
        for sound, count in plan:
            for index in range(count):
                clip_id = f"{dataset_id}-{sound.name}-{index:03d}"
                recipes[(dataset_id, clip_id)] = ClipRecipe(
                    sound.kind,
                    sound.freq,
                    sound.freq_end,
                    hash64(seed, dataset_id, clip_id),
                    duration_s,
                    rate,
                    noise_level=0.3 if sound.kind == "noise" else 0.02,
                )
                clips.append(
                    LabeledClip(dataset_id, clip_id, sound.primary, sound.secondary, None, sound.taxonomy)
                )
        registry[dataset_id] = tuple(clips)
    logger.debug("synthetic corpus: %d datasets, %d clips", len(registry), len(recipes))
    return SyntheticCorpus(DatasetRegistry(registry), recipes)


def tone_corpus(
    n_datasets: int = 4,
    *,
    classes_per_dataset: int = 2,
    clips_per_class: int = 42,
    ambient_per_dataset: int = 0,
    shared: bool = True,
    duration_s: float = 1.0,
    rate: int = 16_000,
    seed: int = 0,
    prefix: str = "reef",
) -> SyntheticCorpus:
    """Datasets of spectrally distinct tone classes, plus one class every dataset shares."""
    needed = n_datasets * classes_per_dataset + 1
    if needed > len(TONE_FREQUENCIES):
        raise ConfigError(
            f"{n_datasets} datasets x {classes_per_dataset} classes needs {needed} tones, "
            f"only {len(TONE_FREQUENCIES)} are defined",
            field="n_datasets",
        )
    datasets: dict[str, list[SoundClass]] = {}
    for index in range(n_datasets):
        classes = []
        for slot in range(classes_per_dataset):
            freq = TONE_FREQUENCIES[1 + index * classes_per_dataset + slot]
            primary = "biophony" if slot % 2 == 0 else "anthrophony"
            classes.append(SoundClass(primary, f"{prefix}{index}_c{slot}", "tone", freq))
        if shared:
            classes.append(SoundClass("biophony", SHARED_CLASS, "harmonic", TONE_FREQUENCIES[0]))
        datasets[f"{prefix}{index}"] = classes
    return build_corpus(
        datasets,
        clips_per_class=clips_per_class,
        ambient_per_dataset=ambient_per_dataset,
        duration_s=duration_s,
        rate=rate,
        seed=seed,
    )


def bird_corpus(
    n_datasets: int = 1,
    *,
    clips_per_class: int = 20,
    duration_s: float = 1.0,
    rate: int = 16_000,
    seed: int = 1,
) -> SyntheticCorpus:
    """Chirp 'species' with genus / family / order labels."""
    species = [
        ("sp_a", "gen_a", "fam_a", 1200.0, 2400.0),
        ("sp_b", "gen_a", "fam_a", 2400.0, 1200.0),
        ("sp_c", "gen_b", "fam_a", 3000.0, 4500.0),
        ("sp_d", "gen_c", "fam_b", 4500.0, 3000.0),
    ]
    classes = [
        SoundClass(
            "biophony",
            name,
            "chirp",
            start,
            end,
            {"genus": genus, "family": family, "order": "ord_a"},
        )
        for name, genus, family, start, end in species
    ]
    return build_corpus(
        {f"bird{index}": classes for index in range(n_datasets)},
        clips_per_class=clips_per_class,
        duration_s=duration_s,
        rate=rate,
        seed=seed,
    )


def freesound_corpus(
    *,
    clips_per_class: int = 20,
    duration_s: float = 1.0,
    rate: int = 16_000,
    seed: int = 2,
) -> SyntheticCorpus:
    """General sound events, including a 'bird' class for label stripping."""
    classes = [
        SoundClass("anthrophony", "engine", "harmonic", 120.0),
        SoundClass("geophony", "rain", "noise"),
        SoundClass("anthrophony", "alarm", "chirp", 800.0, 1600.0),
        SoundClass("biophony", "bird", "chirp", 3500.0, 5000.0),
    ]
    return build_corpus(
        {"freesound": classes},
        clips_per_class=clips_per_class,
        duration_s=duration_s,
        rate=rate,
        seed=seed,
    )


def write_corpus(corpus: SyntheticCorpus, root: str | Path) -> DatasetRegistry:
    """Render every clip to ``root/<dataset>/<clip>.wav`` and write ``root/manifest.json``."""
    base = Path(root)
    load = corpus.loader()
    datasets: dict[str, tuple[LabeledClip, ...]] = {}
    for dataset_id, clips in corpus.registry.datasets.items():
        written = []
        for clip in clips:
            relative = f"{dataset_id}/{clip.clip_id}.wav"
            write_wav(load(clip), base / relative)
            written.append(
                LabeledClip(
                    clip.dataset_id, clip.clip_id, clip.primary, clip.secondary, relative, clip.taxonomy
                )
            )
        datasets[dataset_id] = tuple(written)
    registry = DatasetRegistry(datasets)
    save_manifest(registry, base / "manifest.json")
    logger.info("wrote %d clips under %s", len(registry.all_clips()), base)
    return registry


def corpus_names() -> Iterable[str]:
    return ("tones", "tones+bird", "tones+bird+freesound")


def named_corpus(name: str, *, seed: int = 0, clips_per_class: int = 42) -> SyntheticCorpus:
    corpus = tone_corpus(seed=seed, clips_per_class=clips_per_class)
    if name == "tones":
        return corpus
    corpus = corpus.merged(bird_corpus(seed=seed + 1))
    if name == "tones+bird":
        return corpus
    if name == "tones+bird+freesound":
        return corpus.merged(freesound_corpus(seed=seed + 2))
    raise ConfigError(f"unknown synthetic corpus {name!r} (known: {', '.join(corpus_names())})", field="corpus")
