"""Dataset registry, label amalgamation, ambient filtering and seeded splits."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any

from .errors import ConfigError, FileIoError, InsufficientSamplesError, ManifestError
from .io import json_dump, schema_errors, write_csv_rows
from .seeds import derived_rng

logger = logging.getLogger(__name__)

PRIMARY_LABELS: tuple[str, ...] = ("biophony", "anthrophony", "geophony", "ambient")
AMBIENT = "ambient"
DEFAULT_MIN_TOTAL = 42
CSV_COLUMNS = ["dataset", "clip", "primary", "secondary", "path"]


@dataclass(frozen=True, slots=True)
class LabeledClip:
    dataset_id: str
    clip_id: str
    primary: str
    secondary: str | None = None
    path: str | None = None
    taxonomy: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.primary not in PRIMARY_LABELS:
            raise ConfigError(
                f"clip {self.clip_id!r}: primary label {self.primary!r} not in {PRIMARY_LABELS}",
                field="primary",
            )
        object.__setattr__(self, "taxonomy", MappingProxyType(dict(self.taxonomy)))

    def __hash__(self) -> int:
        return hash((self.dataset_id, self.clip_id))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledClip):
            return NotImplemented
        return (
            self.dataset_id == other.dataset_id
            and self.clip_id == other.clip_id
            and self.primary == other.primary
            and self.secondary == other.secondary
            and self.path == other.path
            and dict(self.taxonomy) == dict(other.taxonomy)
        )

    @property
    def class_name(self) -> str:
        """Secondary label when present, else the primary label."""
        return self.secondary if self.secondary is not None else self.primary

    @property
    def is_primary_only(self) -> bool:
        return self.secondary is None

    def label_for(self, key: str) -> str | None:
        if key == "primary":
            return self.primary
        if key == "secondary":
            return self.secondary
        return self.taxonomy.get(key)

    def with_secondary(self, secondary: str | None) -> LabeledClip:
        return LabeledClip(
            self.dataset_id, self.clip_id, self.primary, secondary, self.path, self.taxonomy
        )


@dataclass(frozen=True, slots=True)
class DatasetRegistry:
    datasets: Mapping[str, tuple[LabeledClip, ...]]

    def __post_init__(self) -> None:
        frozen: dict[str, tuple[LabeledClip, ...]] = {}
        for dataset_id, clips in self.datasets.items():
            clips = tuple(clips)
            seen: set[str] = set()
            for clip in clips:
                if clip.dataset_id != dataset_id:
                    raise ConfigError(
                        f"clip {clip.clip_id!r} claims dataset {clip.dataset_id!r} "
                        f"but sits in {dataset_id!r}",
                        field="dataset_id",
                    )
                if clip.clip_id in seen:
                    raise ConfigError(
                        f"duplicate clip id {clip.clip_id!r} in dataset {dataset_id!r}",
                        field="clip_id",
                    )
                seen.add(clip.clip_id)
            frozen[dataset_id] = clips
        object.__setattr__(self, "datasets", MappingProxyType(frozen))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetRegistry):
            return NotImplemented
        return dict(self.datasets) == dict(other.datasets)

    @classmethod
    def from_clips(cls, clips: Iterable[LabeledClip]) -> DatasetRegistry:
        grouped: dict[str, list[LabeledClip]] = defaultdict(list)
        for clip in clips:
            grouped[clip.dataset_id].append(clip)
        return cls({key: tuple(value) for key, value in grouped.items()})

    @property
    def dataset_ids(self) -> list[str]:
        return list(self.datasets)

    def clips(self, dataset_id: str) -> tuple[LabeledClip, ...]:
        try:
            return self.datasets[dataset_id]
        except KeyError as exc:
            raise ConfigError(f"unknown dataset {dataset_id!r}", field="dataset") from exc

    def all_clips(self, dataset_ids: Iterable[str] | None = None) -> list[LabeledClip]:
        ids = self.dataset_ids if dataset_ids is None else list(dataset_ids)
        return [clip for dataset_id in ids for clip in self.clips(dataset_id)]

    def class_inventory(self, dataset_id: str) -> dict[str, int]:
        counts = Counter(clip.class_name for clip in self.clips(dataset_id))
        return dict(sorted(counts.items()))

    def without(self, dataset_id: str) -> DatasetRegistry:
        self.clips(dataset_id)
        return DatasetRegistry(
            {key: value for key, value in self.datasets.items() if key != dataset_id}
        )

    def subset(self, dataset_ids: Iterable[str]) -> DatasetRegistry:
        return DatasetRegistry({key: self.clips(key) for key in dataset_ids})

    def map_datasets(self, fn) -> DatasetRegistry:
        return DatasetRegistry({key: tuple(fn(list(value))) for key, value in self.datasets.items()})


@dataclass(frozen=True, slots=True)
class SplitSpec:
    k: int
    seed: int = 0
    min_test: int = 10
    max_train: int = 32

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}", field="k")
        if self.k > self.max_train:
            raise ConfigError(f"k={self.k} exceeds max_train={self.max_train}", field="k")
        if self.min_test < 1:
            raise ConfigError(f"min_test must be >= 1, got {self.min_test}", field="min_test")


def amalgamate_labels(
    clips: Sequence[LabeledClip], min_total: int = DEFAULT_MIN_TOTAL
) -> list[LabeledClip]:
    """Merge rare secondary classes into their primary label, then drop rare primary groups.

    Ambient clips are exempt from both steps.
    """
    dataset_ids = {clip.dataset_id for clip in clips}
    if len(dataset_ids) > 1:
        raise ConfigError(
            f"amalgamation runs per dataset, got clips from {sorted(dataset_ids)}",
            field="dataset_id",
        )
    secondary_counts = Counter(
        clip.secondary
        for clip in clips
        if clip.primary != AMBIENT and clip.secondary is not None
    )
    merged: list[LabeledClip] = []
    for clip in clips:
        if (
            clip.primary != AMBIENT
            and clip.secondary is not None
            and secondary_counts[clip.secondary] < min_total
        ):
            merged.append(clip.with_secondary(None))
        else:
            merged.append(clip)
    primary_only = Counter(
        clip.primary for clip in merged if clip.primary != AMBIENT and clip.is_primary_only
    )
    kept = [
        clip
        for clip in merged
        if clip.primary == AMBIENT
        or not clip.is_primary_only
        or primary_only[clip.primary] >= min_total
    ]
    dropped = len(merged) - len(kept)
    if dropped:
        logger.info("amalgamation discarded %d primary-only clips", dropped)
    return kept


def amalgamate_registry(
    registry: DatasetRegistry, min_total: int = DEFAULT_MIN_TOTAL
) -> DatasetRegistry:
    return registry.map_datasets(lambda clips: amalgamate_labels(clips, min_total))


def filter_ambient(clips: Iterable[LabeledClip]) -> list[LabeledClip]:
    return [clip for clip in clips if clip.primary != AMBIENT]


def split_train_test(
    clips: Sequence[LabeledClip], spec: SplitSpec
) -> tuple[list[LabeledClip], list[LabeledClip]]:
    """Per class: k seeded picks for training, everything else for testing.

    The pick is a seeded permutation of the lexicographically sorted clip ids,
    so the split depends on (seed, class, ids) and never on input order.
    """
    by_class: dict[str, list[LabeledClip]] = defaultdict(list)
    for clip in clips:
        by_class[clip.class_name].append(clip)
    train: list[LabeledClip] = []
    test: list[LabeledClip] = []
    for class_name in sorted(by_class):
        members = sorted(by_class[class_name], key=lambda clip: clip.clip_id)
        needed = spec.k + spec.min_test
        if len(members) < needed:
            raise InsufficientSamplesError(
                f"class {class_name!r} has {len(members)} clips, needs {needed} "
                f"(k={spec.k} + min_test={spec.min_test})",
                class_name=class_name,
            )
        order = derived_rng(spec.seed, class_name).permutation(len(members))
        picked = set(int(index) for index in order[: spec.k])
        for index, clip in enumerate(members):
            (train if index in picked else test).append(clip)
    return train, test


def _line_of(text: str, needle: str, occurrence: int = 1) -> int | None:
    offset = -1
    for _ in range(occurrence):
        offset = text.find(needle, offset + 1)
        if offset < 0:
            return None
    return text.count("\n", 0, offset) + 1


def _line_near(payload: Any, path: list[Any], text: str) -> int | None:
    """Line of the innermost object on ``path`` that carries a string ``id``."""
    node = payload
    anchor: str | None = None
    for part in path:
        if isinstance(node, Mapping) and isinstance(node.get("id"), str):
            anchor = node["id"]
        try:
            node = node[part]
        except (KeyError, IndexError, TypeError):
            break
    if isinstance(node, Mapping) and isinstance(node.get("id"), str):
        anchor = node["id"]
    if anchor is None or not text:
        return None
    return _line_of(text, json.dumps(anchor))


def _clip_from_payload(dataset_id: str, payload: Mapping[str, Any]) -> LabeledClip:
    return LabeledClip(
        dataset_id=dataset_id,
        clip_id=payload["id"],
        primary=payload["primary"],
        secondary=payload.get("secondary"),
        path=payload.get("path"),
        taxonomy=payload.get("taxonomy") or {},
    )


def registry_from_payload(payload: Any, *, text: str = "") -> DatasetRegistry:
    errors = schema_errors(payload, "manifest")
    if errors:
        first = errors[0]
        location = "/".join(str(part) for part in first.path) or "<root>"
        raise ManifestError(
            f"manifest schema violation at {location}: {first.message}",
            field=location,
            line=_line_near(payload, list(first.path), text),
        )
    datasets: dict[str, tuple[LabeledClip, ...]] = {}
    for entry in payload["datasets"]:
        dataset_id = entry["id"]
        if dataset_id in datasets:
            raise ManifestError(
                f"duplicate dataset id {dataset_id!r}",
                field="datasets/id",
                line=_line_of(text, json.dumps(dataset_id)),
            )
        seen: set[str] = set()
        clips: list[LabeledClip] = []
        for clip_payload in entry["clips"]:
            clip_id = clip_payload["id"]
            if clip_id in seen:
                raise ManifestError(
                    f"duplicate clip id {clip_id!r} in dataset {dataset_id!r}",
                    field="clips/id",
                    line=_line_of(text, json.dumps(clip_id), occurrence=2),
                )
            seen.add(clip_id)
            clips.append(_clip_from_payload(dataset_id, clip_payload))
        datasets[dataset_id] = tuple(clips)
    return DatasetRegistry(datasets)


def registry_to_payload(registry: DatasetRegistry) -> dict[str, Any]:
    datasets = []
    for dataset_id, clips in registry.datasets.items():
        rendered = []
        for clip in clips:
            item: dict[str, Any] = {
                "id": clip.clip_id,
                "path": clip.path,
                "primary": clip.primary,
                "secondary": clip.secondary,
            }
            if clip.taxonomy:
                item["taxonomy"] = dict(clip.taxonomy)
            rendered.append(item)
        datasets.append({"id": dataset_id, "clips": rendered})
    return {"datasets": datasets}


def load_manifest(path: str | Path) -> DatasetRegistry:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest {source} does not exist", field="manifest") from exc
    except OSError as exc:
        raise FileIoError(f"could not read {source}: {exc}", path=str(source)) from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{source}: invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return registry_from_payload(payload, text=text)


def save_manifest(registry: DatasetRegistry, path: str | Path) -> None:
    json_dump(path, registry_to_payload(registry))


def export_csv(registry: DatasetRegistry, path: str | Path) -> None:
    rows = [
        {
            "dataset": clip.dataset_id,
            "clip": clip.clip_id,
            "primary": clip.primary,
            "secondary": clip.secondary or "",
            "path": clip.path or "",
        }
        for clip in registry.all_clips()
    ]
    write_csv_rows(path, CSV_COLUMNS, rows)


def summarize_registry(registry: DatasetRegistry) -> dict[str, Any]:
    clips = registry.all_clips()
    total = len(clips)
    primary_counts = Counter(clip.primary for clip in clips)
    secondary = sorted({clip.secondary for clip in clips if clip.secondary is not None})
    return {
        "datasets": len(registry.datasets),
        "clips": total,
        "primary": {
            label: {
                "count": primary_counts.get(label, 0),
                "percent": round(100.0 * primary_counts.get(label, 0) / total, 2) if total else 0.0,
            }
            for label in PRIMARY_LABELS
        },
        "secondary_labels": len(secondary),
        "classes": {dataset_id: registry.class_inventory(dataset_id) for dataset_id in registry.dataset_ids},
    }
