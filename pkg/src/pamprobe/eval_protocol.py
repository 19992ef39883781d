"""Few-shot evaluation, leave-one-dataset-out rotation and staged sweeps."""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np

from .corpus import (
    DEFAULT_MIN_TOTAL,
    DatasetRegistry,
    LabeledClip,
    SplitSpec,
    amalgamate_labels,
    split_train_test,
)
from .embedder import AudioLoader, EmbeddingBackend, EmbeddingCache, embed_clip
from .errors import ConfigError, PamProbeError
from .mixture_pretrain import (
    FeatureBank,
    MixtureConfig,
    MixtureSource,
    PretrainHparams,
    ToyEmbedderModel,
    build_feature_bank,
    build_heads,
    exclude_holdout_classes,
    mixture_clips,
    pretrain_toy,
)
from .probe import AUC_CONVENTION, ProbeHparams, evaluate_probe, train_probe
from .seeds import hash64
from .settings import resolve_workers

logger = logging.getLogger(__name__)

RecordStatus = Literal["ok", "failed", "skipped"]
ALL = "*"
SEED_CONVENTION = "paired: seed = hash64(base_seed, dataset, k, repeat), shared across models"
STD_CONVENTION = "population standard deviation (ddof=0) over ok records"
DEFAULT_KS: tuple[int, ...] = (4, 8, 16, 32)


@dataclass(frozen=True, slots=True)
class EvalRecord:
    model: str
    dataset: str
    k: int
    repeat: int
    seed: int
    macro_auc: float | None = None
    per_class: Mapping[str, float] = field(default_factory=dict)
    status: RecordStatus = "ok"
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.status == "ok":
            if self.macro_auc is None or not 0.0 <= self.macro_auc <= 1.0:
                raise ConfigError(f"ok record needs an AUC in [0, 1], got {self.macro_auc}")
        elif not self.reason:
            raise ConfigError(f"{self.status} record needs a reason")


@dataclass(frozen=True, slots=True)
class AggregateRow:
    model: str
    dataset: str
    k: int
    mean: float
    std: float
    n: int


@dataclass(slots=True)
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    conventions: dict[str, str] = field(default_factory=dict)

    def extend(self, other: EvalReport) -> None:
        self.records.extend(other.records)
        self.conventions.update(other.conventions)

    def ok(self) -> list[EvalRecord]:
        return [record for record in self.records if record.status == "ok"]

    def aggregates(self) -> list[AggregateRow]:
        """Mean and std per (model, dataset, k) and per (model, k) pooled over datasets."""
        groups: dict[tuple[str, str, int], list[float]] = defaultdict(list)
        for record in self.ok():
            groups[(record.model, record.dataset, record.k)].append(record.macro_auc)
            groups[(record.model, ALL, record.k)].append(record.macro_auc)
        rows = []
        for (model, dataset, k), values in sorted(groups.items()):
            data = np.asarray(values, dtype=np.float64)
            rows.append(AggregateRow(model, dataset, k, float(data.mean()), float(data.std()), data.size))
        return rows

    def mean_auc(self, model: str | None = None) -> float | None:
        values = [r.macro_auc for r in self.ok() if model is None or r.model == model]
        return float(np.mean(values)) if values else None


def default_conventions(hparams: ProbeHparams) -> dict[str, str]:
    return {
        "auc": AUC_CONVENTION,
        "seeds": SEED_CONVENTION,
        "std": STD_CONVENTION,
        "optimizer": hparams.optimizer,
    }


@dataclass(frozen=True, slots=True)
class FewshotConfig:
    ks: tuple[int, ...] = DEFAULT_KS
    repeats: int = 10
    base_seed: int = 0
    min_test: int = 10
    max_train: int = 32
    min_total: int | None = DEFAULT_MIN_TOTAL
    hparams: ProbeHparams = field(default_factory=ProbeHparams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ks", tuple(self.ks))
        if not self.ks:
            raise ConfigError("ks must not be empty", field="ks")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}", field="repeats")
        for k in self.ks:
            SplitSpec(k, 0, self.min_test, self.max_train)


def derive_seed(base_seed: int, dataset_id: str, k: int, repeat: int) -> int:
    return hash64(base_seed, dataset_id, k, repeat)


def embed_dataset(
    clips: Sequence[LabeledClip],
    backend: EmbeddingBackend,
    *,
    loader: AudioLoader | None = None,
    cache: EmbeddingCache | None = None,
    workers: int | None = None,
) -> dict[str, np.ndarray]:
    """Clip id -> embedding; the cache is read by workers and written here only."""
    missing = [clip for clip in clips if cache is None or clip.clip_id not in cache]
    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        computed = list(pool.map(lambda clip: embed_clip(clip, backend, loader=loader), missing))
    if cache is not None:
        for vector in computed:
            cache.put(vector.clip_id, vector)
    out = {vector.clip_id: vector.values for vector in computed}
    if cache is not None:
        for clip in clips:
            if clip.clip_id not in out:
                out[clip.clip_id] = cache.get(clip.clip_id).values
    logger.info("embedded %d clips (%d from cache)", len(clips), len(clips) - len(computed))
    return out


def run_cell(
    clips: Sequence[LabeledClip],
    embeddings: Mapping[str, np.ndarray],
    dataset_id: str,
    k: int,
    repeat: int,
    cfg: FewshotConfig,
    model_name: str,
) -> EvalRecord:
    """One (k, repeat) cell: seeded split, probe training, macro AUC on the held-out clips."""
    seed = derive_seed(cfg.base_seed, dataset_id, k, repeat)
    base = dict(model=model_name, dataset=dataset_id, k=k, repeat=repeat, seed=seed)
    n_classes = len({clip.class_name for clip in clips})
    if n_classes < 2:
        return EvalRecord(
            **base, status="skipped", reason=f"{dataset_id} has {n_classes} classes, a probe needs 2"
        )
    try:
        train, test = split_train_test(clips, SplitSpec(k, seed, cfg.min_test, cfg.max_train))
    except PamProbeError as exc:
        return EvalRecord(**base, status="skipped", reason=exc.message)
    try:
        model = train_probe(
            np.stack([embeddings[clip.clip_id] for clip in train]),
            [clip.class_name for clip in train],
            cfg.hparams,
            seed,
            ids=[clip.clip_id for clip in train],
        )
        result = evaluate_probe(
            model,
            np.stack([embeddings[clip.clip_id] for clip in test]),
            [clip.class_name for clip in test],
        )
    except PamProbeError as exc:
        logger.warning("cell %s k=%d repeat=%d failed: %s", dataset_id, k, repeat, exc.message)
        return EvalRecord(**base, status="failed", reason=exc.message)
    return EvalRecord(**base, macro_auc=result.macro, per_class=result.per_class)


def fewshot_eval(
    registry: DatasetRegistry,
    dataset_id: str,
    backend: EmbeddingBackend,
    cfg: FewshotConfig | None = None,
    *,
    loader: AudioLoader | None = None,
    cache: EmbeddingCache | None = None,
    workers: int | None = None,
    model_name: str | None = None,
) -> EvalReport:
    cfg = cfg or FewshotConfig()
    clips = list(registry.clips(dataset_id))
    if cfg.min_total is not None:
        clips = amalgamate_labels(clips, cfg.min_total)
    name = model_name or getattr(backend, "name", backend.spec.name)
    embeddings = embed_dataset(clips, backend, loader=loader, cache=cache, workers=workers)
    cells = [(k, repeat) for k in cfg.ks for repeat in range(cfg.repeats)]
    with ThreadPoolExecutor(max_workers=resolve_workers(workers)) as pool:
        records = list(
            pool.map(
                lambda cell: run_cell(clips, embeddings, dataset_id, cell[0], cell[1], cfg, name),
                cells,
            )
        )
    skipped = [record for record in records if record.status == "skipped"]
    if skipped:
        ks = sorted({record.k for record in skipped})
        logger.warning("%s: k=%s skipped: %s", dataset_id, ks, skipped[0].reason)
    return EvalReport(records, default_conventions(cfg.hparams))


@dataclass(frozen=True, slots=True)
class DregConfig:
    mixture: MixtureConfig | None = None
    hparams: PretrainHparams = field(default_factory=PretrainHparams)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)
    seed: int = 0
    steps: int = 2000
    batch_size: int = 32

    def base_mixture(self, registry: DatasetRegistry) -> MixtureConfig:
        if self.mixture is not None:
            return self.mixture
        return MixtureConfig.single(
            "reef", registry.dataset_ids, steps=self.steps, batch_size=self.batch_size
        )


@dataclass(slots=True)
class RotationResult:
    holdout: str
    training_datasets: list[str]
    report: EvalReport | None
    removed_classes: dict[str, list[str]] = field(default_factory=dict)
    status: RecordStatus = "ok"
    reason: str | None = None


def rotation_bank(
    registry: DatasetRegistry,
    config: DregConfig,
    *,
    loader: AudioLoader | None = None,
    workers: int | None = None,
) -> FeatureBank:
    """Energies for every pretraining clip, shared read-only by all rotations."""
    sources = mixture_clips(config.base_mixture(registry), registry)
    clips = [clip for group in sources.values() for clip in group]
    return build_feature_bank(clips, config.hparams, loader=loader, workers=workers)


def run_rotation(
    registry: DatasetRegistry,
    holdout: str,
    config: DregConfig,
    *,
    loader: AudioLoader | None = None,
    bank: FeatureBank | None = None,
    workers: int | None = None,
) -> RotationResult:
    training: list[str] = []
    try:
        base = config.base_mixture(registry)
        mixture = base.without_dataset(holdout)
        training = mixture.dataset_ids
        # heads come from the full mixture so holdout-only classes are visible to the filter
        built = build_heads(base, registry)
        heads = [
            head
            for head in exclude_holdout_classes(built, holdout, registry)
            if head.group is None or head.group in mixture.groups
        ]
        kept = {head.name: set(head.classes) for head in heads}
        removed = {
            head.name: sorted(set(head.classes) - kept.get(head.name, set())) for head in built
        }
        removed = {name: classes for name, classes in removed.items() if classes}
        model = pretrain_toy(
            mixture,
            registry,
            heads,
            config.hparams,
            hash64(config.seed, "dreg", holdout),
            loader=loader,
            bank=bank,
            workers=workers,
        )
        report = fewshot_eval(
            registry,
            holdout,
            model,
            config.fewshot,
            loader=loader,
            workers=workers,
            model_name=f"toy-dreg:{holdout}",
        )
    except PamProbeError as exc:
        logger.warning("rotation %s failed: %s", holdout, exc.message)
        return RotationResult(holdout, training, None, status="failed", reason=exc.message)
    return RotationResult(holdout, training, report, removed)


def dreg(
    registry: DatasetRegistry,
    config: DregConfig | None = None,
    *,
    holdouts: Sequence[str] | None = None,
    loader: AudioLoader | None = None,
    workers: int | None = None,
) -> list[RotationResult]:
    """Hold out each dataset in turn: pretrain on the rest, few-shot evaluate on it."""
    config = config or DregConfig()
    if len(registry.datasets) < 2:
        raise ConfigError("rotation needs at least 2 datasets", field="datasets")
    holdouts = list(holdouts) if holdouts is not None else registry.dataset_ids
    bank = rotation_bank(registry, config, loader=loader, workers=workers)
    results = []
    for index, holdout in enumerate(holdouts, start=1):
        logger.info("rotation %d/%d: holding out %s", index, len(holdouts), holdout)
        results.append(
            run_rotation(registry, holdout, config, loader=loader, bank=bank, workers=workers)
        )
    return results


@dataclass(frozen=True, slots=True)
class SweepSpec:
    stage: str
    axes: Mapping[str, tuple[Any, ...]]
    fixed: Mapping[str, Any] = field(default_factory=dict)
    validation: tuple[str, ...] = ()
    training: tuple[str, ...] = ()
    training_data: str = ""

    def __post_init__(self) -> None:
        axes = {name: tuple(values) for name, values in self.axes.items()}
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "validation", tuple(self.validation))
        object.__setattr__(self, "training", tuple(self.training))
        if not axes or any(not values for values in axes.values()):
            raise ConfigError(f"stage {self.stage!r}: every axis needs values", field="axes")
        overlap = set(self.validation) & set(self.training)
        if overlap:
            raise ConfigError(
                f"stage {self.stage!r}: {sorted(overlap)} are both training and validation",
                field="validation",
            )

    def grid(self) -> list[dict[str, Any]]:
        names = list(self.axes)
        return [dict(zip(names, combo, strict=True)) for combo in itertools.product(*self.axes.values())]


@dataclass(frozen=True, slots=True)
class SweepRow:
    training_data: str
    stage: str
    params: Mapping[str, Any]
    probed: tuple[str, ...]
    auc: float | None
    reason: str | None = None

    def value(self, axis: str) -> Any:
        return self.params.get(axis) if axis in self.probed else None


TrainFn = Callable[[Mapping[str, Any]], Any]
EvalFn = Callable[[Any, Mapping[str, Any]], float]


def _sort_rows(rows: list[SweepRow]) -> list[SweepRow]:
    return sorted(rows, key=lambda row: (row.auc is None, -(row.auc or 0.0)))


def sweep(stages: Sequence[SweepSpec], train_fn: TrainFn, eval_fn: EvalFn) -> list[SweepRow]:
    """Run each stage's grid with earlier stage winners fixed.

    Rows are grouped by stage and ranked by AUC descending; failures rank last.
    """
    winners: dict[str, Any] = {}
    table: list[SweepRow] = []
    for spec in stages:
        rows: list[SweepRow] = []
        grid = spec.grid()
        for index, combo in enumerate(grid, start=1):
            params = {**spec.fixed, **winners, **combo, "validation": spec.validation}
            try:
                auc = float(eval_fn(train_fn(params), params))
                rows.append(SweepRow(spec.training_data, spec.stage, params, tuple(spec.axes), auc))
            except PamProbeError as exc:
                logger.warning("sweep stage %s config %s failed: %s", spec.stage, combo, exc.message)
                rows.append(
                    SweepRow(spec.training_data, spec.stage, params, tuple(spec.axes), None, exc.message)
                )
            logger.info("sweep stage %s: %d/%d done", spec.stage, index, len(grid))
        rows = _sort_rows(rows)
        if rows and rows[0].auc is not None:
            winners.update({axis: rows[0].params[axis] for axis in spec.axes})
        table.extend(rows)
    return table


ARCH_AXIS = ("t0", "t1", "t2")
LR_AXIS = (0.01, 0.001, 0.0001)
BATCH_AXIS = (64, 128)
BIRD_WEIGHT_AXIS = (0.1, 0.25, 0.5, 0.75, 0.9)
BIRD_PROPORTION_AXIS = (0.5, 0.6, 0.7, 0.8)
STAGE_ONE_FIXED = {"arch": "t0", "batch": 64}
SWEEP_PRESETS = ("reefset", "reef_bird", "reef_bird_freesound")


def sweep_preset(
    name: str, validation: Sequence[str] = (), training: Sequence[str] = ()
) -> list[SweepSpec]:
    """Stage layouts of the three published sweeps."""
    common = dict(validation=tuple(validation), training=tuple(training), training_data=name)
    if name == "reefset":
        return [
            SweepSpec("NA", {"arch": ARCH_AXIS, "lr": LR_AXIS, "batch": BATCH_AXIS}, **common),
        ]
    if name in ("reef_bird", "reef_bird_freesound"):
        weights = BIRD_WEIGHT_AXIS if name == "reef_bird" else BIRD_PROPORTION_AXIS
        return [
            SweepSpec("1", {"lr": LR_AXIS, "bird_weight": weights}, STAGE_ONE_FIXED, **common),
            SweepSpec("2", {"arch": ARCH_AXIS, "batch": BATCH_AXIS}, **common),
        ]
    raise ConfigError(f"unknown sweep preset {name!r} (known: {', '.join(SWEEP_PRESETS)})", field="preset")


def bird_reef_mixture(
    bird_weight: float, reef: Sequence[str], bird: Sequence[str], **options: Any
) -> MixtureConfig:
    return MixtureConfig(
        (
            MixtureSource("reef", 1.0 - bird_weight, tuple(reef)),
            MixtureSource("bird", bird_weight, tuple(bird)),
        ),
        **options,
    )


def three_domain_mixture(
    bird_proportion: float,
    reef: Sequence[str],
    bird: Sequence[str],
    freesound: Sequence[str],
    *,
    reef_weight: float = 0.1,
    strip_label: str | None = "bird",
    **options: Any,
) -> MixtureConfig:
    """Reef fixed at ``reef_weight``; the rest split between bird and general sound."""
    rest = 1.0 - reef_weight - bird_proportion
    if rest <= 0:
        raise ConfigError(
            f"bird proportion {bird_proportion} leaves no weight for the general-sound source",
            field="bird_weight",
        )
    return MixtureConfig(
        (
            MixtureSource("reef", reef_weight, tuple(reef)),
            MixtureSource("bird", bird_proportion, tuple(bird)),
            MixtureSource("freesound", rest, tuple(freesound), strip_label),
        ),
        **options,
    )


@dataclass(frozen=True, slots=True)
class PretrainSweep:
    """Train/eval callables that pretrain the toy embedder per sweep configuration."""

    registry: DatasetRegistry
    preset: str
    domains: Mapping[str, Sequence[str]]
    hparams: PretrainHparams = field(default_factory=PretrainHparams)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)
    steps: int = 2000
    seed: int = 0
    loader: AudioLoader | None = None
    workers: int | None = None

    def mixture(self, params: Mapping[str, Any]) -> MixtureConfig:
        validation = set(params.get("validation", ()))
        reef = [d for d in self.domains.get("reef", ()) if d not in validation]
        options = dict(steps=self.steps, batch_size=int(params.get("batch", 64)))
        if self.preset == "reefset":
            return MixtureConfig.single("reef", reef, **options)
        bird = self.domains.get("bird", ())
        if self.preset == "reef_bird":
            return bird_reef_mixture(float(params["bird_weight"]), reef, bird, **options)
        return three_domain_mixture(
            float(params["bird_weight"]), reef, bird, self.domains.get("freesound", ()), **options
        )

    def train(self, params: Mapping[str, Any]) -> ToyEmbedderModel:
        mixture = self.mixture(params)
        hparams = replace(
            self.hparams,
            lr=float(params.get("lr", self.hparams.lr)),
            arch=str(params.get("arch", self.hparams.arch)),
        )
        heads = build_heads(mixture, self.registry)
        return pretrain_toy(
            mixture, self.registry, heads, hparams, self.seed, loader=self.loader, workers=self.workers
        )

    def evaluate(self, model: ToyEmbedderModel, params: Mapping[str, Any]) -> float:
        validation = params.get("validation", ())
        if not validation:
            raise ConfigError("sweep needs validation datasets", field="validation")
        report = EvalReport()
        for dataset_id in validation:
            report.extend(
                fewshot_eval(
                    self.registry, dataset_id, model, self.fewshot, loader=self.loader, workers=self.workers
                )
            )
        mean = report.mean_auc()
        if mean is None:
            raise ConfigError("no validation cell produced an AUC")
        return mean
