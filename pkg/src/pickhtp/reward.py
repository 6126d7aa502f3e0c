"""Emotion distributions, the entropy-based reward, and the KL-trained text scorer."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import TrainingError, ValidationError

BINARY_CLASSES = ("Positive", "Negative")
FEATURE_DIM = 4096
SUM_TOL = 1e-9


@dataclass(frozen=True)
class EmotionDistribution:
    class_names: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        k = len(self.class_names)
        if k < 2:
            raise ValidationError("a distribution needs at least 2 classes")
        if len(self.probs) != k:
            raise ValidationError(f"{len(self.probs)} probabilities for {k} classes")
        if len(set(self.class_names)) != k:
            raise ValidationError("duplicate class names")
        if any(not math.isfinite(p) or p < 0 for p in self.probs):
            raise ValidationError(f"invalid probabilities {self.probs}")
        if abs(math.fsum(self.probs) - 1.0) > SUM_TOL:
            raise ValidationError(f"probabilities sum to {math.fsum(self.probs)}, not 1")

    @classmethod
    def normalized(cls, class_names: Sequence[str], values: Sequence[float]) -> "EmotionDistribution":
        arr = np.asarray(values, dtype=np.float64)
        total = arr.sum()
        if not np.all(np.isfinite(arr)) or np.any(arr < 0) or total <= 0:
            raise ValidationError(f"cannot normalise {list(values)}")
        return cls(tuple(class_names), tuple(arr / total))

    @classmethod
    def uniform(cls, class_names: Sequence[str]) -> "EmotionDistribution":
        k = len(class_names)
        return cls(tuple(class_names), (1.0 / k,) * k)

    @property
    def k(self) -> int:
        return len(self.class_names)

    def as_array(self) -> np.ndarray:
        return np.array(self.probs, dtype=np.float64)

    def argmax_label(self) -> str:
        # first index wins exact ties
        return self.class_names[int(np.argmax(self.as_array()))]

    def to_dict(self) -> dict[str, float]:
        return dict(zip(self.class_names, self.probs))


def entropy(dist: EmotionDistribution) -> float:
    """Natural-log entropy, with 0 * log 0 taken as 0."""
    return -math.fsum(p * math.log(p) for p in dist.probs if p > 0)


def normalized_entropy(dist: EmotionDistribution) -> float:
    return entropy(dist) / math.log(dist.k)


def reward_score(dist: EmotionDistribution) -> float:
    """``1 - H(p) / ln K``: 0 for uniform, 1 for one-hot."""
    return min(1.0, max(0.0, 1.0 - normalized_entropy(dist)))


def featurize(text: str, dim: int = FEATURE_DIM) -> np.ndarray:
    """Dense hashed bag-of-words counts over lowercase whitespace tokens."""
    return kernels.token_counts(text, dim)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_loss(W: np.ndarray, b: np.ndarray, X: np.ndarray, T: np.ndarray) -> float:
    """Mean over rows of KL(T || softmax(XW + b))."""
    logp = log_softmax(X @ W + b)
    pos = T > 0
    terms = np.where(pos, T * (np.log(np.where(pos, T, 1.0)) - logp), 0.0)
    return float(terms.sum(axis=1).mean())


def kl_loss_and_grad(
    W: np.ndarray, b: np.ndarray, X: np.ndarray, T: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradients; d(loss)/d(logits) is (softmax - target) / n."""
    n = X.shape[0]
    logits = X @ W + b
    G = (softmax(logits) - T) / n
    return kl_loss(W, b, X, T), X.T @ G, G.sum(axis=0)


@dataclass
class TextScorer:
    class_names: tuple[str, ...]
    weights: np.ndarray
    bias: np.ndarray
    dim: int = FEATURE_DIM
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        k = len(self.class_names)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(self.dim, k)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(k)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("scorer weights must be finite")

    @classmethod
    def zeros(cls, class_names: Sequence[str], dim: int = FEATURE_DIM) -> "TextScorer":
        k = len(class_names)
        return cls(tuple(class_names), np.zeros((dim, k)), np.zeros(k), dim)

    @property
    def k(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "K": self.k,
            "class_names": list(self.class_names),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TextScorer":
        if len(data["class_names"]) != data["K"]:
            raise ValidationError("scorer K does not match class_names")
        return cls(
            tuple(data["class_names"]),
            np.asarray(data["weights"], dtype=np.float64),
            np.asarray(data["bias"], dtype=np.float64),
            int(data["dim"]),
            dict(data.get("training_meta", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TextScorer":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def score_text(scorer: TextScorer, text: str) -> EmotionDistribution:
    x = featurize(text, scorer.dim)
    p = softmax(x @ scorer.weights + scorer.bias)
    return EmotionDistribution(scorer.class_names, tuple(p / p.sum()))


def train_scorer(
    dataset: Sequence[tuple[str, EmotionDistribution]],
    epochs: int = 200,
    learning_rate: float = 0.1,
    dim: int = FEATURE_DIM,
) -> TextScorer:
    """Full-batch gradient descent on mean KL(target || prediction) from zero init."""
    if not dataset:
        raise TrainingError("empty training set")
    class_names = dataset[0][1].class_names
    if any(t.class_names != class_names for _, t in dataset):
        raise TrainingError("targets disagree on class names")
    k = len(class_names)
    X_full = np.stack([featurize(text, dim) for text, _ in dataset])
    T = np.stack([t.as_array() for _, t in dataset])
    # Buckets never hit get zero gradient from zero init, so train on the used ones only.
    cols = np.flatnonzero(X_full.any(axis=0))
    X = X_full[:, cols]
    W = np.zeros((cols.size, k))
    b = np.zeros(k)
    initial = kl_loss(W, b, X, T)
    for epoch in range(epochs):
        loss, dW, db = kl_loss_and_grad(W, b, X, T)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        W -= learning_rate * dW
        b -= learning_rate * db
    final = kl_loss(W, b, X, T)
    if not math.isfinite(final):
        raise TrainingError(f"non-finite loss at epoch {epochs}", epoch=epochs)
    weights = np.zeros((dim, k))
    weights[cols] = W
    meta = {
        "epochs": epochs,
        "learning_rate": learning_rate,
        "initial_loss": initial,
        "final_loss": final,
        "n_examples": len(dataset),
    }
    return TextScorer(class_names, weights, b, dim, meta)
