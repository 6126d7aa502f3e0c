"""Test-time adaptation of the feature generator with group-relative policy gradients.

The generator is a categorical policy over a fixed phrase vocabulary per
object category. Each step samples a group of phrases, captions them, scores
the captions with the reward model, standardises the rewards within the
group, and takes REINFORCE steps on the logits.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import BackendError, PolicyUpdateError, SamplingError, ValidationError
from .geometry import SubDrawing
from .reward import TextScorer, reward_score, score_text

GROUP_SIZE = 4
LEARNING_RATE = 0.1
SLOT_BUDGET = 200
ADV_EPS = 1e-8
MIN_PHRASES = 4

Captioner = Callable[[SubDrawing, str, str], str]


class FeatureVocabulary(dict):
    """Mapping of lowercase category -> tuple of candidate phrases."""

    def __init__(self, data: Mapping[str, Iterable[str]]):
        super().__init__()
        for category, phrases in data.items():
            phrases = tuple(phrases)
            if len(phrases) < MIN_PHRASES:
                raise ValidationError(f"category {category!r} needs at least {MIN_PHRASES} phrases")
            if len(set(phrases)) != len(phrases):
                raise ValidationError(f"duplicate phrases in category {category!r}")
            self[category.lower()] = phrases

    @classmethod
    def load(cls, path: str | Path) -> "FeatureVocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def phrases(self, category: str) -> tuple[str, ...]:
        try:
            return self[category.lower()]
        except KeyError:
            raise ValidationError(f"no vocabulary for category {category!r}") from None


@dataclass(frozen=True)
class FeatureCandidate:
    category: str
    phrase: str
    index: int
    policy_prob: float
    excluded: frozenset[str] = frozenset()
    reward: float | None = None
    advantage: float = 0.0


@dataclass
class FeaturePolicy:
    vocabulary: FeatureVocabulary
    seed: int = 0
    learning_rate: float = LEARNING_RATE
    logits: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        for cat, phrases in self.vocabulary.items():
            self.logits.setdefault(cat, np.zeros(len(phrases)))
            self.logits[cat] = np.asarray(self.logits[cat], dtype=np.float64)

    def support(self, category: str, excluded: Iterable[str] = ()) -> np.ndarray:
        excluded = set(excluded)
        return np.array([p not in excluded for p in self.vocabulary.phrases(category)], dtype=np.uint8)

    def probabilities(self, category: str, excluded: Iterable[str] = ()) -> np.ndarray:
        """Softmax of the logits renormalised over the non-excluded phrases."""
        mask = self.support(category, excluded).astype(bool)
        if not mask.any():
            raise SamplingError(f"every phrase of {category!r} is excluded")
        z = self.logits[category.lower()]
        out = np.zeros_like(z)
        zs = z[mask] - z[mask].max()
        e = np.exp(zs)
        out[mask] = e / e.sum()
        return out

    def best(self, category: str, excluded: Iterable[str] = ()) -> str:
        p = self.probabilities(category, excluded)
        return self.vocabulary.phrases(category)[int(np.argmax(p))]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "vocabulary": {c: list(p) for c, p in self.vocabulary.items()},
            "logits": {c: v.tolist() for c, v in self.logits.items()},
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_json(cls, data: dict) -> "FeaturePolicy":
        policy = cls(
            FeatureVocabulary(data["vocabulary"]),
            seed=int(data["seed"]),
            learning_rate=float(data["learning_rate"]),
            logits={c: np.asarray(v, dtype=np.float64) for c, v in data["logits"].items()},
        )
        if "rng_state" in data:
            policy.rng.bit_generator.state = data["rng_state"]
        return policy

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeaturePolicy":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def sample_group(
    policy: FeaturePolicy,
    category: str,
    group_size: int = GROUP_SIZE,
    excluded: Iterable[str] = (),
    rng: np.random.Generator | None = None,
) -> list[FeatureCandidate]:
    if group_size < 2:
        raise ValidationError("group size must be at least 2")
    excluded = frozenset(excluded)
    rng = rng if rng is not None else policy.rng
    phrases = policy.vocabulary.phrases(category)
    p = policy.probabilities(category, excluded)
    cdf = np.cumsum(p)
    draws = np.searchsorted(cdf, rng.random(group_size) * cdf[-1], side="right")
    draws = np.minimum(draws, len(phrases) - 1)
    out = []
    for i in draws:
        # guard against landing on a zero-mass slot through float ties
        while p[i] == 0.0:
            i -= 1
        out.append(FeatureCandidate(category.lower(), phrases[i], int(i), float(p[i]), excluded))
    return out


def group_advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> list[float]:
    """Standardise rewards within a group: (r - mean) / (population std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValidationError("a group needs at least 2 rewards")
    if np.all(r == r[0]):
        return [0.0] * r.size
    centered = r - r.mean()
    return (centered / (r.std() + eps)).tolist()


def policy_update(
    policy: FeaturePolicy, candidates: Sequence[FeatureCandidate], lr: float | None = None
) -> FeaturePolicy:
    """Apply one REINFORCE step per candidate, in order, over the sampled support."""
    if not candidates:
        return policy
    category = candidates[0].category
    if any(c.category != category for c in candidates):
        raise ValidationError("all candidates must share a category")
    lr = policy.learning_rate if lr is None else lr
    logits = policy.logits[category]
    trial = logits.copy()
    support = policy.support(category, candidates[0].excluded)
    actions = np.array([c.index for c in candidates], dtype=np.int64)
    if not all(support[actions]):
        raise ValidationError("candidate phrase outside the sampling support")
    advantages = np.array([c.advantage for c in candidates], dtype=np.float64)
    kernels.apply_policy_updates(trial, support, actions, advantages, float(lr))
    if not np.all(np.isfinite(trial)):
        raise PolicyUpdateError(f"non-finite logits for {category!r} after update")
    policy.logits[category] = trial
    return policy


def extract_features(
    sub_drawing: SubDrawing,
    n_dynamic: int,
    policy: FeaturePolicy,
    captioner: Captioner,
    scorer: TextScorer,
    excluded_init: Iterable[str] = (),
    group_size: int = GROUP_SIZE,
    budget: int = SLOT_BUDGET,
) -> list[str]:
    """Adapt the policy on one sub-drawing and commit ``n_dynamic`` distinct phrases.

    Captions are memoised per phrase, so each phrase is captioned at most once
    per sub-drawing.
    """
    if n_dynamic < 1:
        raise ValidationError("n_dynamic must be >= 1")
    category = sub_drawing.main_object_labels[0].lower()
    excluded = set(excluded_init)
    rewards: dict[str, float] = {}
    committed: list[str] = []

    def reward_for(phrase: str, slot: int) -> float:
        if phrase not in rewards:
            try:
                caption = captioner(sub_drawing, category, phrase)
            except BackendError as exc:
                exc.slot = slot
                raise
            except Exception as exc:
                raise BackendError(f"captioner failed in slot {slot}: {exc}", kind="captioner", slot=slot) from exc
            rewards[phrase] = reward_score(score_text(scorer, caption))
        return rewards[phrase]

    for slot in range(n_dynamic):
        if policy.support(category, excluded).sum() > 1:
            for _ in range(budget):
                group = sample_group(policy, category, group_size, excluded)
                r = [reward_for(c.phrase, slot) for c in group]
                adv = group_advantages(r)
                group = [replace(c, reward=ri, advantage=ai) for c, ri, ai in zip(group, r, adv)]
                policy_update(policy, group)
        phrase = policy.best(category, excluded)
        committed.append(phrase)
        excluded.add(phrase)
    return committed

