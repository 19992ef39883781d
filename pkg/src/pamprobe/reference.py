"""Published reference values, kept for context and error-reduction comparisons."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True, slots=True)
class NetworkReference:
    name: str
    training_domain: str
    training_classes: int
    input_rate_khz: float
    window_s: float
    embedding_dim: int
    parameters: str
    rtf: float


NETWORKS: dict[str, NetworkReference] = {
    "vggish": NetworkReference("vggish", "AudioSet (YouTube)", 31000, 16, 0.96, 128, "72.1M", 41.1),
    "yamnet": NetworkReference("yamnet", "AudioSet (YouTube)", 521, 16, 0.96, 1024, "4.7M", 86.04),
    "birdnet": NetworkReference(
        "birdnet", "bioacoustic (primarily birds)", 3337, 48, 3.0, 1024, "10.4M", 260.68
    ),
    "perch": NetworkReference("perch", "bioacoustic (birds)", 10932, 32, 5.0, 1280, "80.1M", 39.41),
}

# Mean macro AUC-ROC over 4/8/16/32 shots and all reef datasets.
PUBLISHED_MEAN_AUC: dict[str, float] = {
    "birdnet": 0.908,
    "perch": 0.881,
    "yamnet": 0.834,
    "vggish": 0.813,
    "reefset": 0.724,
    "reef_bird": 0.895,
    "reef_bird_freesound": 0.928,
    "reef_bird_freesound_pcen2": 0.933,
}


def network(name: str) -> NetworkReference:
    try:
        return NETWORKS[name]
    except KeyError as exc:
        known = ", ".join(sorted(NETWORKS))
        raise ConfigError(f"no reference network {name!r} (known: {known})", field="reference") from exc


def published_auc(name: str) -> float:
    try:
        return PUBLISHED_MEAN_AUC[name]
    except KeyError as exc:
        known = ", ".join(sorted(PUBLISHED_MEAN_AUC))
        raise ConfigError(f"no published AUC for {name!r} (known: {known})", field="reference") from exc
