"""Detection ingestion and three-level decomposition of a drawing."""
from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DecompositionError, DetectionParseError, ValidationError

MAIN_CATEGORIES = frozenset({"house", "tree", "person"})
DEDUPE_THRESHOLD = 0.9
FOCUS_COLOR = (0, 255, 0)
FOCUS_STROKE = 3


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if min(coords) < 0:
            raise ValidationError(f"negative box coordinates {coords}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValidationError(f"degenerate box {coords}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: str
    score: float
    is_main: bool = field(init=False)

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection score {self.score} outside [0, 1]")
        object.__setattr__(self, "is_main", self.label.strip().lower() in MAIN_CATEGORIES)

    def sort_key(self) -> tuple:
        return (self.label, self.box.x_min, self.box.y_min)


class Level(str, enum.Enum):
    SINGLE_OBJECT = "single_object"
    MULTI_OBJECT = "multi_object"
    WHOLE = "whole"


@dataclass(frozen=True)
class SubDrawing:
    level: Level
    source_image_id: str
    focus_box: BoundingBox | None = None
    main_object_labels: tuple[str, ...] = ()
    neighbor_labels: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.main_object_labels)
        if self.level is Level.SINGLE_OBJECT and n != 1:
            raise ValidationError("single-object view needs exactly one main object")
        if self.level is Level.MULTI_OBJECT and n < 2:
            raise ValidationError("multi-object view needs at least two main objects")
        if self.level is not Level.SINGLE_OBJECT and self.neighbor_labels:
            raise ValidationError("only single-object views carry neighbours")
        if self.level is Level.WHOLE and self.focus_box is not None:
            raise ValidationError("whole view has no focus box")
        if self.level is not Level.WHOLE and self.focus_box is None:
            raise ValidationError(f"{self.level.value} view needs a focus box")

    def to_dict(self) -> dict:
        return {
            "level": self.level.value,
            "source_image_id": self.source_image_id,
            "focus_box": self.focus_box.as_list() if self.focus_box else None,
            "main_object_labels": list(self.main_object_labels),
            "neighbor_labels": list(self.neighbor_labels),
        }


@dataclass(frozen=True)
class DecompositionResult:
    singles: tuple[SubDrawing, ...]
    multis: tuple[SubDrawing, ...]
    whole: SubDrawing

    @property
    def n_single(self) -> int:
        return len(self.singles)

    @property
    def n_multi(self) -> int:
        return len(self.multis)

    def to_dict(self) -> dict:
        return {
            "singles": [s.to_dict() for s in self.singles],
            "multis": [m.to_dict() for m in self.multis],
            "whole": self.whole.to_dict(),
        }


def parse_detections(records: object) -> list[Detection]:
    if not isinstance(records, list):
        raise DetectionParseError("detections JSON must be an array")
    out = []
    for i, rec in enumerate(records):
        try:
            label = rec["label"]
            box = rec["box"]
            score = float(rec.get("score", 1.0))
        except (TypeError, KeyError, ValueError) as exc:
            raise ValidationError(f"detection {i}: malformed record ({exc})") from exc
        if not isinstance(label, str) or not label.strip():
            raise ValidationError(f"detection {i}: label must be a non-empty string")
        try:
            out.append(Detection(BoundingBox.from_list(box), label.strip(), score))
        except (ValidationError, TypeError, ValueError) as exc:
            raise ValidationError(f"detection {i}: {exc}") from exc
    return out


def load_detections(path: str | Path) -> list[Detection]:
    """Read a detections-JSON file: ``[{"label", "box": [x0, y0, x1, y1], "score"}]``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DetectionParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_detections(records)


def overlap_over_smaller(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area divided by the area of the smaller box."""
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return min(1.0, inter / min(a.area, b.area))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


OVERLAP_METRICS = {"containment": overlap_over_smaller, "iou": iou}


def _sorted(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=Detection.sort_key)


def union_box(boxes: Iterable[BoundingBox]) -> BoundingBox:
    boxes = list(boxes)
    out = boxes[0]
    for b in boxes[1:]:
        out = out.union(b)
    return out


def build_single_object_views(
    mains: Sequence[Detection], others: Sequence[Detection], image_id: str
) -> list[SubDrawing]:
    if not mains:
        raise DecompositionError("no main objects detected")
    others = _sorted(others)
    views = []
    for det in _sorted(mains):
        neighbors = tuple(o.label for o in others if det.box.intersection_area(o.box) > 0)
        views.append(
            SubDrawing(
                level=Level.SINGLE_OBJECT,
                source_image_id=image_id,
                focus_box=det.box,
                main_object_labels=(det.label,),
                neighbor_labels=neighbors,
            )
        )
    return views


def candidate_groups(mains: Sequence[Detection]) -> list[tuple[Detection, ...]]:
    """Main-object groups in generation order: the full group (3+ mains) first, then pairs."""
    mains = _sorted(mains)
    groups: list[tuple[Detection, ...]] = []
    if len(mains) >= 3:
        groups.append(tuple(mains))
    groups.extend(itertools.combinations(mains, 2))
    return groups


def dedupe_boxes(
    boxes: Sequence[BoundingBox], threshold: float = DEDUPE_THRESHOLD, metric: str = "containment"
) -> list[int]:
    """Greedy dedupe; returns indices of kept boxes, earlier boxes win."""
    overlap = OVERLAP_METRICS[metric]
    kept: list[int] = []
    for i, box in enumerate(boxes):
        if all(overlap(box, boxes[j]) <= threshold for j in kept):
            kept.append(i)
    return kept


def build_multi_object_views(
    mains: Sequence[Detection],
    image_id: str,
    threshold: float = DEDUPE_THRESHOLD,
    metric: str = "containment",
) -> list[SubDrawing]:
    if not mains:
        raise DecompositionError("no main objects detected")
    groups = candidate_groups(mains)
    boxes = [union_box(d.box for d in g) for g in groups]
    return [
        SubDrawing(
            level=Level.MULTI_OBJECT,
            source_image_id=image_id,
            focus_box=boxes[i],
            main_object_labels=tuple(d.label for d in groups[i]),
        )
        for i in dedupe_boxes(boxes, threshold, metric)
    ]


def decompose(
    detections: Sequence[Detection],
    image_id: str,
    threshold: float = DEDUPE_THRESHOLD,
    metric: str = "containment",
) -> DecompositionResult:
    mains = [d for d in detections if d.is_main]
    others = [d for d in detections if not d.is_main]
    singles = build_single_object_views(mains, others, image_id)
    multis = build_multi_object_views(mains, image_id, threshold, metric)
    whole = SubDrawing(level=Level.WHOLE, source_image_id=image_id)
    return DecompositionResult(tuple(singles), tuple(multis), whole)


def clamp_box(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel rectangle (inclusive) of ``box`` clipped to the image."""
    x0 = min(max(int(math.floor(box.x_min)), 0), width - 1)
    y0 = min(max(int(math.floor(box.y_min)), 0), height - 1)
    x1 = min(max(int(math.ceil(box.x_max)), 0), width - 1)
    y1 = min(max(int(math.ceil(box.y_max)), 0), height - 1)
    return x0, y0, x1, y1


def load_image(path: str | Path) -> Image.Image:
    """Open an image as RGB; raises OSError when unreadable."""
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def annotate_focus(image: Image.Image, box: BoundingBox) -> Image.Image:
    """Copy of ``image`` with a green rectangle drawn just inside ``box``."""
    arr = np.array(image.convert("RGB"), dtype=np.uint8)
    h, w = arr.shape[:2]
    x0, y0, x1, y1 = clamp_box(box, w, h)
    s = FOCUS_STROKE
    color = np.array(FOCUS_COLOR, dtype=np.uint8)
    arr[y0 : min(y0 + s, y1 + 1), x0 : x1 + 1] = color
    arr[max(y1 - s + 1, y0) : y1 + 1, x0 : x1 + 1] = color
    arr[y0 : y1 + 1, x0 : min(x0 + s, x1 + 1)] = color
    arr[y0 : y1 + 1, max(x1 - s + 1, x0) : x1 + 1] = color
    return Image.fromarray(arr)
