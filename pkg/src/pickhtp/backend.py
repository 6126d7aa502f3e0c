"""Gateway to the captioner, psychological-state predictor and feature generator models.

Prompts are rendered from templates, sent to either the deterministic mock
backend or an HTTP chat endpoint, and the replies are parsed strictly. A reply
that arrives but fails to parse is retried with the same prompt.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import random
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx

from .errors import BackendError, ParseError, TemplateError, TransportError, ValidationError
from .reward import BINARY_CLASSES, EmotionDistribution

log = logging.getLogger(__name__)

API_KEY_ENV = "PICK_API_KEY"
MAX_RETRIES = 3
TIMEOUT_SECS = 60.0
MAX_IN_FLIGHT = 4
SUM_BAND = (0.9, 1.1)
MAX_PHRASE_WORDS = 12

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")
_NUMBER = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+))"
AUTO_SLOTS = ("class_list", "output_format")


# -- templates -------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    role: str
    text: str
    shape: str  # distribution | distribution_confidence | caption | phrase

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_SLOT_RE.findall(self.text)))


def load_templates(path: str | Path | None = None) -> dict[str, PromptTemplate]:
    if path is None:
        raw = resources.files("pickhtp").joinpath("data/templates.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    data = json.loads(raw)
    return {tid: PromptTemplate(tid, d["role"], d["text"], d["shape"]) for tid, d in data.items()}


DEFAULT_TEMPLATES = load_templates()


def class_list_text(class_names: Sequence[str]) -> str:
    names = list(class_names)
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def output_format_text(class_names: Sequence[str]) -> str:
    return "{" + "; ".join(f"{c}: x.xx" for c in class_names) + "}"


def render_prompt(
    template_id: str,
    slots: Mapping[str, str] | None = None,
    class_names: Sequence[str] = BINARY_CLASSES,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> str:
    templates = templates or DEFAULT_TEMPLATES
    try:
        template = templates[template_id]
    except KeyError:
        raise TemplateError(f"unknown template {template_id!r}") from None
    values = {
        "class_list": class_list_text(class_names),
        "output_format": output_format_text(class_names),
        **(slots or {}),
    }
    for name in template.slots:
        if name not in values:
            raise TemplateError(f"template {template_id!r} is missing slot {name!r}")
    return _SLOT_RE.sub(lambda m: str(values[m.group(1)]), template.text)


# -- parsing ---------------------------------------------------------------


@dataclass(frozen=True)
class Distribution:
    dist: EmotionDistribution


@dataclass(frozen=True)
class DistributionWithConfidence:
    dist: EmotionDistribution
    confidence: float


@dataclass(frozen=True)
class Caption:
    text: str


@dataclass(frozen=True)
class Phrase:
    text: str


def parse_distribution(
    text: str, with_confidence: bool = False, class_names: Sequence[str] = BINARY_CLASSES
) -> Distribution | DistributionWithConfidence:
    values = []
    for name in class_names:
        m = re.search(rf"(?<![A-Za-z]){re.escape(name)}\s*:\s*{_NUMBER}", text, re.IGNORECASE)
        if m is None:
            raise ParseError(f"class {name!r} missing from output", text)
        v = float(m.group(1))
        if v < 0 or not math.isfinite(v):
            raise ParseError(f"negative or invalid value for {name!r}", text)
        values.append(v)
    total = math.fsum(values)
    if not (SUM_BAND[0] <= total <= SUM_BAND[1]):
        raise ParseError(f"probabilities sum to {total:.3f}, outside {SUM_BAND}", text)
    dist = EmotionDistribution.normalized(class_names, values)
    if not with_confidence:
        return Distribution(dist)
    m = re.search(rf"confidence\s*:\s*{_NUMBER}", text, re.IGNORECASE)
    if m is None:
        raise ParseError("confidence missing from output", text)
    c = min(1.0, max(0.0, float(m.group(1))))
    return DistributionWithConfidence(dist, c)


def parse_caption(text: str) -> Caption:
    m = re.search(r"Description\s*:\s*(.+)", text, re.IGNORECASE | re.DOTALL)
    if m is None or not m.group(1).strip() or m.group(1).strip().lower() == "xxx":
        raise ParseError("no 'Description:' in output", text)
    return Caption(" ".join(m.group(1).split()))


def parse_phrase(text: str) -> Phrase:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty phrase", text)
    phrase = lines[0].strip().strip("\"'`*.").strip()
    if not phrase or len(phrase.split()) > MAX_PHRASE_WORDS:
        raise ParseError("expected a short phrase", text)
    return Phrase(phrase)


def _hundredths(probs: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``probs`` to integer hundredths summing to 100."""
    scaled = [p * 100.0 for p in probs]
    floors = [math.floor(s) for s in scaled]
    short = 100 - sum(floors)
    order = sorted(range(len(scaled)), key=lambda i: (-(scaled[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def format_distribution(dist: EmotionDistribution, confidence: float | None = None) -> str:
    parts = "; ".join(f"{c}: {h / 100:.2f}" for c, h in zip(dist.class_names, _hundredths(dist.probs)))
    out = "{" + parts + "}"
    if confidence is not None:
        out += f"; Confidence: {min(1.0, max(0.0, confidence)):.2f}"
    return out


_PARSERS = {
    "distribution": lambda text, cn: parse_distribution(text, False, cn),
    "distribution_confidence": lambda text, cn: parse_distribution(text, True, cn),
    "caption": lambda text, cn: parse_caption(text),
    "phrase": lambda text, cn: parse_phrase(text),
}


# -- transports ------------------------------------------------------------


@dataclass(frozen=True)
class BackendRequest:
    role: str
    template_id: str
    prompt: str
    slots: Mapping[str, str] = field(default_factory=dict)
    image_id: str | None = None
    image_png: bytes | None = None
    class_names: tuple[str, ...] = BINARY_CLASSES


class Backend(Protocol):
    wants_image: bool

    def complete(self, request: BackendRequest) -> str: ...


_MOCK_TEXTURES = (
    "thin faint lines",
    "heavy dark shading",
    "bold firm strokes",
    "small cramped shapes",
    "wide open spacing",
    "broken uneven edges",
    "rounded soft contours",
    "dense scribbled hatching",
)
_MOCK_PHRASES = (
    "roof slope",
    "door state",
    "window count",
    "trunk width",
    "crown size",
    "branch direction",
    "arm position",
    "facial expression",
    "line pressure",
    "ground line",
)


class MockBackend:
    """Deterministic stand-in for a model API.

    Every reply is a pure function of (role, template id, slot values, image
    id, seed) and always parses.
    """

    wants_image = False

    def __init__(self, seed: int = 0):
        self.seed = seed

    def digest(self, request: BackendRequest) -> int:
        key = json.dumps(
            [request.role, request.template_id, sorted(request.slots.items()), request.image_id, self.seed],
            sort_keys=True,
        )
        return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "big")

    def complete(self, request: BackendRequest) -> str:
        rng = random.Random(self.digest(request))
        shape = DEFAULT_TEMPLATES[request.template_id].shape if request.template_id in DEFAULT_TEMPLATES else "distribution"
        if shape == "caption":
            obj = request.slots.get("object", "object")
            attr = request.slots.get("attribute", "shape")
            return f"Description: The {obj} shows its {attr} drawn with {rng.choice(_MOCK_TEXTURES)}."
        if shape == "phrase":
            excluded = {s.strip().lower() for s in request.slots.get("excluded_features", "").split(",")}
            options = [p for p in _MOCK_PHRASES if p not in excluded] or list(_MOCK_PHRASES)
            return rng.choice(options)
        weights = [rng.gammavariate(0.8, 1.0) + 1e-3 for _ in request.class_names]
        total = sum(weights)
        dist = EmotionDistribution(request.class_names, tuple(w / total for w in weights))
        if shape == "distribution_confidence":
            return format_distribution(dist, round(rng.uniform(0.2, 1.0), 2))
        return format_distribution(dist)


class HttpBackend:
    """POST {model, prompt, image_base64?} -> {text}."""

    wants_image = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = TIMEOUT_SECS,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, request: BackendRequest) -> str:
        payload = {"model": self.model, "prompt": request.prompt}
        if request.image_png is not None:
            payload["image_base64"] = base64.b64encode(request.image_png).decode("ascii")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            text = resp.json()["text"]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if not isinstance(text, str):
            raise TransportError("response 'text' is not a string")
        return text


# -- gateway ---------------------------------------------------------------


@dataclass(frozen=True)
class BackendResponse:
    raw_text: str
    parsed: Distribution | DistributionWithConfidence | Caption | Phrase
    attempts: int


class Gateway:
    def __init__(
        self,
        backend: Backend,
        class_names: Sequence[str] = BINARY_CLASSES,
        max_retries: int = MAX_RETRIES,
        max_in_flight: int = MAX_IN_FLIGHT,
        templates: Mapping[str, PromptTemplate] | None = None,
    ):
        if max_retries < 1:
            raise ValidationError("max_retries must be >= 1")
        self.backend = backend
        self.class_names = tuple(class_names)
        self.max_retries = max_retries
        self.templates = dict(templates or DEFAULT_TEMPLATES)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def query(
        self,
        template_id: str,
        slots: Mapping[str, str] | None = None,
        image_id: str | None = None,
        image_png: bytes | None = None,
        role: str | None = None,
    ) -> BackendResponse:
        template = self.templates.get(template_id)
        if template is None:
            raise TemplateError(f"unknown template {template_id!r}")
        slots = dict(slots or {})
        prompt = render_prompt(template_id, slots, self.class_names, self.templates)
        request = BackendRequest(
            role or template.role, template_id, prompt, slots, image_id, image_png, self.class_names
        )
        parser = _PARSERS[template.shape]
        last_raw: str | None = None
        kind = "parse"
        for attempt in range(1, self.max_retries + 1):
            try:
                with self._slots:
                    raw = self.backend.complete(request)
            except TransportError as exc:
                kind = "transport"
                log.warning("%s attempt %d: %s", template_id, attempt, exc)
                continue
            last_raw = raw
            try:
                parsed = parser(raw, self.class_names)
            except ParseError as exc:
                kind = "parse"
                log.warning("%s attempt %d: unparseable reply (%s)", template_id, attempt, exc)
                continue
            return BackendResponse(raw, parsed, attempt)
        raise BackendError(
            f"{template_id}: no usable reply after {self.max_retries} attempts ({kind} failure)",
            raw_text=last_raw,
            kind=kind,
        )
