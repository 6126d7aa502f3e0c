"""Corpus orchestration, evaluation metrics and report serialisation."""
from __future__ import annotations

import base64
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import httpx

from .backend import Caption, Distribution, DistributionWithConfidence, Gateway
from .errors import DecompositionError, ManifestError, MetricsError, PickError, ValidationError
from .fusion import FeatureEvidence, LevelSummary, aggregate_subdrawing, final_prediction, level_weights
from .geometry import (
    DecompositionResult,
    Detection,
    Level,
    SubDrawing,
    annotate_focus,
    decompose,
    load_detections,
    load_image,
    parse_detections,
)
from .knowledge import KnowledgeBase, retrieve
from .policy import GROUP_SIZE, SLOT_BUDGET, FeaturePolicy, extract_features
from .reward import BINARY_CLASSES, TextScorer

log = logging.getLogger(__name__)

EMOTION_CLASSES = ("Anger", "Disgust", "Fear", "Joy", "Sadness")
GENERIC_FEATURES = {"htp": ("size", "position"), "emotion": ()}


@dataclass(frozen=True)
class Case:
    id: str
    image: Path | None = None
    detections: Path | None = None
    label: str | None = None


def load_manifest(path: str | Path) -> list[Case]:
    """Read a JSONL manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    cases: list[Case] = []
    seen: set[str] = set()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), (str, int)):
            raise ManifestError(f"{path}:{lineno}: record needs an 'id'")
        cid = str(rec["id"])
        if cid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {cid!r}")
        seen.add(cid)
        label = rec.get("label")
        cases.append(
            Case(
                cid,
                base / rec["image"] if rec.get("image") else None,
                base / rec["detections"] if rec.get("detections") else None,
                str(label) if label is not None else None,
            )
        )
    if not cases:
        raise ManifestError(f"{path}: manifest has no cases")
    return cases


@dataclass
class PipelineConfig:
    task: str = "htp"
    class_names: tuple[str, ...] = BINARY_CLASSES
    generic_features: tuple[str, ...] | None = None
    n_dynamic: int = 2
    group_size: int = GROUP_SIZE
    slot_budget: int = SLOT_BUDGET
    seed: int = 0
    dedupe_threshold: float = 0.9
    overlap_metric: str = "containment"
    max_concurrent_cases: int = 2
    record_timing: bool = False

    def __post_init__(self):
        if self.task not in GENERIC_FEATURES:
            raise ValidationError(f"unknown task {self.task!r}")
        self.class_names = tuple(self.class_names)
        if self.generic_features is None:
            self.generic_features = GENERIC_FEATURES[self.task]
        self.generic_features = tuple(self.generic_features)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        d["generic_features"] = list(self.generic_features)
        return d


@dataclass
class CaseReport:
    id: str
    gold: str | None
    label: str | None = None
    p_final: dict | None = None
    n_single: int = 0
    n_multi: int = 0
    levels: list[dict] = field(default_factory=list)
    singles: list[dict] = field(default_factory=list)
    multis: list[dict] = field(default_factory=list)
    whole: dict | None = None
    error: str | None = None
    timing: dict | None = None

    @property
    def errored(self) -> bool:
        return self.error is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CaseReport":
        return cls(**data)


@dataclass
class MetricsReport:
    n: int
    accuracy: float
    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    confusion: dict[str, dict[str, int]]

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def compute_metrics(pairs: Sequence[tuple[str, str]], class_names: Sequence[str]) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1 and their macro averages."""
    if not pairs:
        raise MetricsError("no (gold, predicted) pairs to evaluate")
    names = list(class_names)
    known = set(names)
    confusion = {g: {p: 0 for p in names} for g in names}
    for gold, pred in pairs:
        if gold not in known or pred not in known:
            raise MetricsError(f"label outside {names}: ({gold!r}, {pred!r})")
        confusion[gold][pred] += 1
    n = len(pairs)
    per_class = {}
    for c in names:
        tp = confusion[c][c]
        fp = sum(confusion[g][c] for g in names if g != c)
        fn = sum(confusion[c][p] for p in names if p != c)
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
    macro = {m: sum(per_class[c][m] for c in names) / len(names) for m in ("precision", "recall", "f1")}
    accuracy = sum(confusion[c][c] for c in names) / n
    return MetricsReport(n, accuracy, per_class, macro, confusion)


def _png_bytes(image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


class Pipeline:
    """Runs every stage for a set of cases against one gateway, KB, scorer and policy."""

    def __init__(
        self,
        gateway: Gateway,
        kb: KnowledgeBase,
        scorer: TextScorer,
        policy: FeaturePolicy,
        config: PipelineConfig | None = None,
        detector_endpoint: str | None = None,
    ):
        self.gateway = gateway
        self.kb = kb
        self.scorer = scorer
        self.policy = policy
        self.config = config or PipelineConfig()
        self.detector_endpoint = detector_endpoint
        if tuple(kb.class_names) != self.config.class_names:
            raise ValidationError(
                f"knowledge base classes {kb.class_names} do not match task classes {self.config.class_names}"
            )

    # -- per-case stages ---------------------------------------------------

    def _detections(self, case: Case) -> list[Detection]:
        if case.detections is not None:
            return load_detections(case.detections)
        if self.detector_endpoint and case.image is not None:
            png = _png_bytes(load_image(case.image))
            try:
                resp = httpx.post(
                    self.detector_endpoint,
                    json={"image_base64": base64.b64encode(png).decode("ascii")},
                    timeout=60.0,
                )
                resp.raise_for_status()
                return parse_detections(resp.json())
            except (httpx.HTTPError, ValueError) as exc:
                raise DecompositionError(f"detection service failed: {exc}") from exc
        raise DecompositionError("case has neither a detections file nor a detection service")

    def _view_png(self, state: "_CaseState", view: SubDrawing) -> bytes | None:
        if not self.gateway.backend.wants_image:
            return None
        if state.image is None:
            if state.case.image is None:
                raise DecompositionError("backend needs the drawing but the case has no image")
            state.image = load_image(state.case.image)
        img = state.image if view.focus_box is None else annotate_focus(state.image, view.focus_box)
        return _png_bytes(img)

    def _caption(self, state: "_CaseState", index: int, category: str, phrase: str) -> str:
        key = (index, phrase)
        if key not in state.captions:
            view = state.decomposition.singles[index]
            resp = self.gateway.query(
                "sobj_caption",
                {"object": category, "attribute": phrase},
                image_id=f"{state.case.id}#single{index}",
                image_png=self._view_png(state, view),
            )
            assert isinstance(resp.parsed, Caption)
            state.captions[key] = resp.parsed.text
        return state.captions[key]

    def prepare(self, case: Case) -> "_CaseState":
        """Decompose and adapt features; mutates the shared policy, so call in a fixed order."""
        state = _CaseState(case)
        t0 = time.perf_counter()
        state.decomposition = decompose(
            self._detections(case), case.id, self.config.dedupe_threshold, self.config.overlap_metric
        )
        for i, view in enumerate(state.decomposition.singles):
            category = view.main_object_labels[0].lower()
            dynamic = extract_features(
                view,
                self.config.n_dynamic,
                self.policy,
                lambda v, cat, phrase, i=i: self._caption(state, i, cat, phrase),
                self.scorer,
                excluded_init=self.config.generic_features,
                group_size=self.config.group_size,
                budget=self.config.slot_budget,
            )
            state.features.append(list(self.config.generic_features) + dynamic)
        state.timing["prepare"] = time.perf_counter() - t0
        return state

    def predict(self, state: "_CaseState") -> CaseReport:
        t0 = time.perf_counter()
        case, dec = state.case, state.decomposition
        report = CaseReport(case.id, case.label, n_single=dec.n_single, n_multi=dec.n_multi)
        single_dists = []
        for i, view in enumerate(dec.singles):
            category = view.main_object_labels[0].lower()
            evidence = []
            for feature in state.features[i]:
                caption = self._caption(state, i, category, feature)
                resp = self.gateway.query(
                    "sobj_predict",
                    {"attribute": feature, "text": caption},
                    image_id=f"{case.id}#single{i}",
                    image_png=self._view_png(state, view),
                )
                assert isinstance(resp.parsed, DistributionWithConfidence)
                hit = retrieve(self.kb, caption, 1)[0]
                evidence.append(
                    FeatureEvidence(
                        feature,
                        caption,
                        resp.parsed.dist,
                        resp.parsed.confidence,
                        hit.record.soft_label,
                        hit.similarity,
                        hit.record.head,
                        hit.record.tail,
                    )
                )
            p = aggregate_subdrawing(evidence)
            single_dists.append(p)
            report.singles.append(
                {
                    **view.to_dict(),
                    "features": state.features[i],
                    "evidence": [e.to_dict() for e in evidence],
                    "p": p.to_dict(),
                }
            )
        multi_dists = []
        for j, view in enumerate(dec.multis):
            resp = self.gateway.query(
                "mobj_predict", {}, image_id=f"{case.id}#multi{j}", image_png=self._view_png(state, view)
            )
            assert isinstance(resp.parsed, Distribution)
            multi_dists.append(resp.parsed.dist)
            report.multis.append({**view.to_dict(), "p": resp.parsed.dist.to_dict()})
        resp = self.gateway.query(
            "whole_predict", {}, image_id=f"{case.id}#whole", image_png=self._view_png(state, dec.whole)
        )
        assert isinstance(resp.parsed, Distribution)
        report.whole = {**dec.whole.to_dict(), "p": resp.parsed.dist.to_dict()}
        summaries = [
            LevelSummary(Level.SINGLE_OBJECT, tuple(single_dists)),
            LevelSummary(Level.MULTI_OBJECT, tuple(multi_dists)),
            LevelSummary(Level.WHOLE, (resp.parsed.dist,)),
        ]
        weights = level_weights(summaries, self.config.task)
        final = final_prediction(summaries, weights, self.config.class_names)
        report.label = final.label
        report.p_final = final.p_final.to_dict()
        report.levels = [s.to_dict() for s in final.levels]
        state.timing["predict"] = time.perf_counter() - t0
        if self.config.record_timing:
            report.timing = dict(state.timing)
        return report

    # -- corpus ------------------------------------------------------------

    def run(self, cases: Sequence[Case]) -> tuple[list[CaseReport], MetricsReport | None]:
        unknown = sorted({c.label for c in cases if c.label is not None} - set(self.config.class_names))
        if unknown:
            raise ValidationError(f"gold labels {unknown} are not among the task classes {self.config.class_names}")
        ordered = sorted(cases, key=lambda c: c.id)
        states: dict[str, _CaseState] = {}
        reports: dict[str, CaseReport] = {}
        # Policy adaptation is single-writer: run it sequentially in id order.
        for case in ordered:
            try:
                states[case.id] = self.prepare(case)
            except (PickError, OSError) as exc:
                log.error("case %s failed during preparation: %s", case.id, exc)
                reports[case.id] = CaseReport(case.id, case.label, error=f"{type(exc).__name__}: {exc}")

        def _predict(case_id: str) -> CaseReport:
            try:
                return self.predict(states[case_id])
            except (PickError, OSError) as exc:
                log.error("case %s failed during prediction: %s", case_id, exc)
                return CaseReport(case_id, states[case_id].case.label, error=f"{type(exc).__name__}: {exc}")

        pending = [c.id for c in ordered if c.id in states]
        with ThreadPoolExecutor(max_workers=max(1, self.config.max_concurrent_cases)) as pool:
            for case_id, report in zip(pending, pool.map(_predict, pending)):
                reports[case_id] = report
        out = [reports[c.id] for c in ordered]
        return out, metrics_for(out, self.config.class_names)


@dataclass
class _CaseState:
    case: Case
    decomposition: DecompositionResult | None = None
    features: list[list[str]] = field(default_factory=list)
    captions: dict[tuple[int, str], str] = field(default_factory=dict)
    image: object = None
    timing: dict[str, float] = field(default_factory=dict)


def metrics_for(reports: Sequence[CaseReport], class_names: Sequence[str]) -> MetricsReport | None:
    pairs = [(r.gold, r.label) for r in reports if not r.errored and r.gold is not None]
    return compute_metrics(pairs, class_names) if pairs else None


def run_corpus(
    cases: Sequence[Case], pipeline: Pipeline
) -> tuple[list[CaseReport], MetricsReport | None]:
    return pipeline.run(cases)


def build_report(
    reports: Sequence[CaseReport], metrics: MetricsReport | None, config: PipelineConfig
) -> dict:
    return {
        "task": config.task,
        "class_names": list(config.class_names),
        "config": config.to_dict(),
        "cases": [r.to_dict() for r in reports],
        "errored": [{"id": r.id, "error": r.error} for r in reports if r.errored],
        "n_cases": len(reports),
        "n_errored": sum(r.errored for r in reports),
        "metrics": metrics.to_dict() if metrics else None,
    }


def dump_report(report: dict) -> str:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
