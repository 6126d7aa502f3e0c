"""Aggregation math: model/knowledge fusion, level averaging, entropy-weighted level fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError, ValidationError
from .geometry import Level
from .reward import EmotionDistribution, normalized_entropy

VARIANTS = ("htp", "emotion")


def _check_compatible(dists: Sequence[EmotionDistribution]) -> tuple[str, ...]:
    names = dists[0].class_names
    for d in dists[1:]:
        if d.class_names != names:
            raise ValidationError(f"class mismatch: {names} vs {d.class_names}")
    return names


def _from_array(class_names: Sequence[str], arr: np.ndarray) -> EmotionDistribution:
    arr = np.clip(arr, 0.0, None)
    return EmotionDistribution(tuple(class_names), tuple(arr / arr.sum()))


def fuse_feature(
    p_mllm: EmotionDistribution, confidence: float, p_kb: EmotionDistribution, similarity: float
) -> EmotionDistribution:
    """Blend the model and knowledge-base distributions with weights exp(c) and exp(s)."""
    names = _check_compatible([p_mllm, p_kb])
    if not 0.0 <= confidence <= 1.0:
        raise ValidationError(f"confidence {confidence} outside [0, 1]")
    if not -1.0 <= similarity <= 1.0:
        raise ValidationError(f"similarity {similarity} outside [-1, 1]")
    wc, ws = math.exp(confidence), math.exp(similarity)
    return _from_array(names, (wc * p_mllm.as_array() + ws * p_kb.as_array()) / (wc + ws))


def mean_distribution(dists: Sequence[EmotionDistribution]) -> EmotionDistribution:
    if not dists:
        raise AggregationError("cannot average an empty set of distributions")
    names = _check_compatible(dists)
    return _from_array(names, np.mean([d.as_array() for d in dists], axis=0))


@dataclass(frozen=True)
class FeatureEvidence:
    feature: str
    description: str
    p_mllm: EmotionDistribution
    confidence: float
    p_kb: EmotionDistribution
    similarity: float
    kb_head: str = ""
    kb_tail: str = ""

    @property
    def fused(self) -> EmotionDistribution:
        return fuse_feature(self.p_mllm, self.confidence, self.p_kb, self.similarity)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "description": self.description,
            "p_mllm": self.p_mllm.to_dict(),
            "confidence": self.confidence,
            "kb_head": self.kb_head,
            "kb_tail": self.kb_tail,
            "p_kb": self.p_kb.to_dict(),
            "similarity": self.similarity,
            "fused": self.fused.to_dict(),
        }


def aggregate_subdrawing(evidences: Sequence[FeatureEvidence]) -> EmotionDistribution:
    """Mean of the fused per-feature distributions of one sub-drawing."""
    if not evidences:
        raise AggregationError("sub-drawing has no feature evidence")
    return mean_distribution([e.fused for e in evidences])


@dataclass(frozen=True)
class LevelSummary:
    level: Level
    distributions: tuple[EmotionDistribution, ...]
    weight: float = 0.0

    @property
    def n(self) -> int:
        return len(self.distributions)

    @property
    def averaged(self) -> EmotionDistribution | None:
        return mean_distribution(self.distributions) if self.distributions else None

    def to_dict(self) -> dict:
        avg = self.averaged
        return {
            "level": self.level.value,
            "n": self.n,
            "distributions": [d.to_dict() for d in self.distributions],
            "averaged": avg.to_dict() if avg else None,
            "weight": self.weight,
        }


def level_weights(summaries: Sequence[LevelSummary], variant: str = "htp") -> list[float]:
    """Entropy-based weights over levels.

    htp: w ∝ n_l * (1 - Ĥ(P_l)); emotion: w ∝ (1 - Ĥ(P_l)), with Ĥ the entropy
    divided by ln K. Empty levels get 0; if every numerator is 0 the present
    levels share the weight equally.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown weighting variant {variant!r}")
    present = [s.n > 0 for s in summaries]
    if not any(present):
        raise AggregationError("no level has any sub-drawing")
    numerators = []
    for s, ok in zip(summaries, present):
        if not ok:
            numerators.append(0.0)
            continue
        certainty = max(0.0, 1.0 - normalized_entropy(s.averaged))
        numerators.append(certainty * (s.n if variant == "htp" else 1.0))
    total = math.fsum(numerators)
    if total <= 0.0:
        k = sum(present)
        return [1.0 / k if ok else 0.0 for ok in present]
    return [x / total for x in numerators]


@dataclass(frozen=True)
class FinalPrediction:
    p_final: EmotionDistribution
    label: str
    levels: tuple[LevelSummary, ...]

    def to_dict(self) -> dict:
        return {
            "p_final": self.p_final.to_dict(),
            "label": self.label,
            "levels": [s.to_dict() for s in self.levels],
        }


def final_prediction(
    summaries: Sequence[LevelSummary], weights: Sequence[float], class_names: Sequence[str]
) -> FinalPrediction:
    acc = np.zeros(len(class_names))
    levels = []
    for s, w in zip(summaries, weights):
        levels.append(LevelSummary(s.level, s.distributions, float(w)))
        if s.n == 0 or w == 0.0:
            continue
        avg = s.averaged
        if avg.class_names != tuple(class_names):
            raise ValidationError(f"level {s.level.value} has classes {avg.class_names}")
        acc += w * avg.as_array()
    p_final = _from_array(class_names, acc)
    return FinalPrediction(p_final, p_final.argmax_label(), tuple(levels))
