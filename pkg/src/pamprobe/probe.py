"""Linear softmax probe on frozen embeddings, AUC-ROC and AUC-error reduction."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import auc as trapezoid_area
from sklearn.metrics import roc_curve

from .errors import (
    ConfigError,
    DivergenceError,
    InfiniteReductionError,
    UndefinedAucError,
)
from .io import json_dump, load_json
from .seeds import derived_rng

logger = logging.getLogger(__name__)

Optimizer = Literal["sgd", "adam"]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

AUC_CONVENTION = "macro one-vs-rest, rank statistic with ties counted 0.5"


@dataclass(frozen=True, slots=True)
class ProbeHparams:
    epochs: int = 128
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: Optimizer = "sgd"
    l2: float = 0.0
    init_std: float = 0.01
    full_batch: bool = False
    dtype: Literal["float32", "float64"] = "float64"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}", field="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", field="batch_size")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", field="lr")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", field="optimizer")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}", field="l2")
        if self.init_std < 0:
            raise ConfigError(f"init_std must be >= 0, got {self.init_std}", field="init_std")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}", field="dtype")

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> ProbeHparams:
        known = {name: payload[name] for name in cls.__dataclass_fields__ if name in payload}
        return cls(**known)


@dataclass(frozen=True, slots=True, eq=False)
class ProbeModel:
    weights: np.ndarray
    bias: np.ndarray
    classes: tuple[str, ...]
    hparams: ProbeHparams = field(default_factory=ProbeHparams)
    seed: int = 0
    losses: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        classes = tuple(self.classes)
        if len(classes) < 2:
            raise ConfigError(f"a probe needs at least 2 classes, got {len(classes)}", field="classes")
        if weights.ndim != 2 or weights.shape[1] != len(classes) or bias.shape != (len(classes),):
            raise ConfigError(
                f"weights {weights.shape} / bias {bias.shape} do not fit {len(classes)} classes"
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ConfigError("probe parameters must be finite")
        weights.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "classes", classes)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def to_payload(self) -> dict[str, Any]:
        return {
            "classes": list(self.classes),
            "dim": self.dim,
            "W": self.weights.reshape(-1).tolist(),
            "b": self.bias.tolist(),
            "hparams": asdict(self.hparams),
            "seed": self.seed,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> ProbeModel:
        try:
            classes = tuple(payload["classes"])
            dim = int(payload["dim"])
            weights = np.asarray(payload["W"], dtype=np.float64).reshape(dim, len(classes))
            return cls(
                weights,
                np.asarray(payload["b"], dtype=np.float64),
                classes,
                ProbeHparams.from_payload(payload.get("hparams", {})),
                int(payload.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed probe payload: {exc}") from exc

    def save(self, path: str | Path) -> None:
        json_dump(path, self.to_payload())

    @classmethod
    def load(cls, path: str | Path) -> ProbeModel:
        return cls.from_payload(load_json(path))


@dataclass(frozen=True, slots=True, eq=False)
class ScoredExample:
    scores: np.ndarray
    true_index: int | None = None

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size < 2:
            raise ConfigError(f"scores must be a vector over >= 2 classes, got {scores.shape}")
        if np.any(scores < 0) or abs(float(scores.sum()) - 1.0) > 1e-6:
            raise ConfigError("scores must be a probability vector")
        if self.true_index is not None and not 0 <= self.true_index < scores.size:
            raise ConfigError(f"true class index {self.true_index} out of range")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)


@dataclass(frozen=True, slots=True)
class AucResult:
    per_class: dict[str, float]
    macro: float


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    l2: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross entropy of soft ``targets`` with its weight and bias gradients."""
    n = features.shape[0]
    logits = features @ weights + bias
    loss = float(-np.sum(targets * log_softmax(logits)) / n)
    delta = (softmax(logits) - targets) / n
    grad_w = features.T @ delta
    if l2:
        loss += 0.5 * l2 * float(np.sum(weights * weights))
        grad_w = grad_w + l2 * weights
    return loss, grad_w, delta.sum(axis=0)


def one_hot(indices: np.ndarray, n_classes: int, dtype: Any = np.float64) -> np.ndarray:
    out = np.zeros((indices.shape[0], n_classes), dtype=dtype)
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def _canonical_order(
    features: np.ndarray, labels: Sequence[str], ids: Sequence[str] | None
) -> list[int]:
    if ids is not None:
        return sorted(range(len(labels)), key=lambda row: (labels[row], ids[row]))
    return sorted(range(len(labels)), key=lambda row: (labels[row], features[row].tolist()))


class Adam:
    """Adaptive-moment updates applied in place to a fixed list of arrays."""

    def __init__(self, shapes: Sequence[tuple[int, ...]], dtype: Any) -> None:
        self.m = [np.zeros(shape, dtype=dtype) for shape in shapes]
        self.v = [np.zeros(shape, dtype=dtype) for shape in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - ADAM_BETA1**self.t
        correction2 = 1.0 - ADAM_BETA2**self.t
        for param, grad, m, v in zip(params, grads, self.m, self.v, strict=True):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad * grad
            param -= lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)


def train_probe(
    features: np.ndarray,
    labels: Sequence[str],
    hparams: ProbeHparams | None = None,
    seed: int = 0,
    *,
    classes: Sequence[str] | None = None,
    ids: Sequence[str] | None = None,
) -> ProbeModel:
    """Fit a softmax probe by mini-batch gradient descent.

    Examples are put in canonical (label, id) order before the seeded
    shuffle, so the result never depends on input order.
    """
    hparams = hparams or ProbeHparams()
    dtype = np.dtype(hparams.dtype)
    data = np.asarray(features, dtype=dtype)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError(f"training features must be a non-empty matrix, got shape {data.shape}")
    if data.shape[0] != len(labels):
        raise ConfigError(f"{data.shape[0]} feature rows but {len(labels)} labels")
    if ids is not None and len(ids) != len(labels):
        raise ConfigError(f"{len(ids)} ids but {len(labels)} labels")
    if not np.all(np.isfinite(data)):
        raise ConfigError("training features contain non-finite values")
    class_list = tuple(classes) if classes is not None else tuple(sorted(set(labels)))
    if len(class_list) < 2:
        raise ConfigError(f"a probe needs at least 2 classes, got {len(class_list)}", field="classes")
    index = {name: position for position, name in enumerate(class_list)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise ConfigError(f"labels {unknown} are not among the probe classes", field="classes")
    empty = [name for name in class_list if name not in set(labels)]
    if empty:
        raise ConfigError(f"class {empty[0]!r} has no training examples", field="classes")

    order = _canonical_order(data, labels, ids)
    data = data[order]
    targets = one_hot(np.array([index[labels[row]] for row in order]), len(class_list), dtype)

    rng = derived_rng(seed, "probe")
    weights = rng.normal(0.0, hparams.init_std, size=(data.shape[1], len(class_list))).astype(dtype)
    bias = np.zeros(len(class_list), dtype=dtype)
    adam = Adam([weights.shape, bias.shape], dtype) if hparams.optimizer == "adam" else None
    n = data.shape[0]
    batch = n if hparams.full_batch else hparams.batch_size

    losses = [cross_entropy_and_grad(weights, bias, data, targets, hparams.l2)[0]]
    for epoch in range(1, hparams.epochs + 1):
        permutation = np.arange(n) if hparams.full_batch else rng.permutation(n)
        for start in range(0, n, batch):
            rows = permutation[start : start + batch]
            loss, grad_w, grad_b = cross_entropy_and_grad(
                weights, bias, data[rows], targets[rows], hparams.l2
            )
            if not np.isfinite(loss):
                raise DivergenceError(f"probe loss became non-finite in epoch {epoch}", epoch=epoch)
            if adam is not None:
                adam.step([weights, bias], [grad_w, grad_b], hparams.lr)
            else:
                weights -= hparams.lr * grad_w
                bias -= hparams.lr * grad_b
        epoch_loss = cross_entropy_and_grad(weights, bias, data, targets, hparams.l2)[0]
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"probe loss became non-finite in epoch {epoch}", epoch=epoch)
        losses.append(epoch_loss)
    logger.debug(
        "probe trained: %d examples, %d classes, loss %.4f -> %.4f",
        n, len(class_list), losses[0], losses[-1],
    )
    return ProbeModel(weights, bias, class_list, hparams, seed, tuple(losses))


def _check_dim(model: ProbeModel, dim: int) -> None:
    if dim != model.dim:
        raise ConfigError(f"embedding is {dim}-d, probe expects {model.dim}-d", field="dim")


def predict_proba(model: ProbeModel, features: np.ndarray) -> np.ndarray:
    data = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(model, data.shape[1])
    return softmax(data @ model.weights + model.bias)


def predict_scores(
    model: ProbeModel, embedding: np.ndarray, true_class: str | None = None
) -> ScoredExample:
    vector = np.asarray(embedding, dtype=np.float64)
    if vector.ndim != 1:
        raise ConfigError(f"expected one embedding vector, got shape {vector.shape}")
    true_index = None
    if true_class is not None:
        if true_class not in model.classes:
            raise ConfigError(f"class {true_class!r} is not a probe class", field="classes")
        true_index = model.classes.index(true_class)
    return ScoredExample(predict_proba(model, vector)[0], true_index)


def score_examples(
    model: ProbeModel, features: np.ndarray, labels: Sequence[str]
) -> list[ScoredExample]:
    probabilities = predict_proba(model, features)
    missing = sorted(set(labels) - set(model.classes))
    if missing:
        raise ConfigError(f"test labels {missing} are not probe classes", field="classes")
    return [
        ScoredExample(row, model.classes.index(label))
        for row, label in zip(probabilities, labels, strict=True)
    ]


def auc_roc_binary(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-statistic AUC: P(score(pos) > score(neg)), ties counted 0.5."""
    values = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(positive, dtype=bool)
    n_pos = int(mask.sum())
    n_neg = int(mask.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC needs positives and negatives, got {n_pos} / {n_neg}", class_name=""
        )
    ranks = rankdata(values, method="average")
    return (float(ranks[mask].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_roc_trapezoid(scores: np.ndarray, positive: np.ndarray) -> float:
    """AUC by trapezoidal integration of the empirical ROC curve."""
    fpr, tpr, _ = roc_curve(np.asarray(positive, dtype=bool), scores, drop_intermediate=False)
    return float(trapezoid_area(fpr, tpr))


def auc_roc_macro(scored: Sequence[ScoredExample], classes: Sequence[str]) -> AucResult:
    if not scored:
        raise UndefinedAucError("no scored examples", class_name="")
    matrix = np.stack([example.scores for example in scored])
    if matrix.shape[1] != len(classes):
        raise ConfigError(f"scores cover {matrix.shape[1]} classes, expected {len(classes)}")
    if any(example.true_index is None for example in scored):
        raise ConfigError("every scored example needs its true class for AUC")
    truth = np.array([example.true_index for example in scored])
    per_class: dict[str, float] = {}
    for position, name in enumerate(classes):
        positive = truth == position
        if positive.all() or not positive.any():
            raise UndefinedAucError(
                f"class {name!r} has {int(positive.sum())} positives and "
                f"{int((~positive).sum())} negatives in the test set",
                class_name=name,
            )
        per_class[name] = auc_roc_binary(matrix[:, position], positive)
    return AucResult(per_class, float(np.mean(list(per_class.values()))))


def evaluate_probe(model: ProbeModel, features: np.ndarray, labels: Sequence[str]) -> AucResult:
    return auc_roc_macro(score_examples(model, features, labels), model.classes)


def auc_error(auc_value: float) -> float:
    """Area above the ROC curve."""
    return 1.0 - auc_value


def error_reduction(auc_better: float, auc_worse: float) -> float:
    """How much lower the better model's AUC error is, in percent of its own error."""
    for name, value in (("auc_better", auc_better), ("auc_worse", auc_worse)):
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {value}", field=name)
    if auc_better == 1.0:
        raise InfiniteReductionError("auc_better is 1.0; its error is zero")
    return (auc_error(auc_worse) - auc_error(auc_better)) / auc_error(auc_better) * 100.0
