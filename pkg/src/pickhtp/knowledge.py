"""Triplet knowledge base: ingestion, text embedding, and cosine retrieval."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from . import kernels
from .errors import EmbeddingError, IngestError, ValidationError
from .reward import BINARY_CLASSES, EmotionDistribution

log = logging.getLogger(__name__)

EMBED_DIM = 512
LABEL_SUM_TOL = 1e-6


class Embedder(Protocol):
    embedder_id: str
    dim: int

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


class HashedTrigramEmbedder:
    """Character-trigram counts hashed into ``dim`` buckets, L2-normalised."""

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self.embedder_id = f"hashed-char3-{dim}"

    def embed(self, text: str) -> np.ndarray:
        v = self.raw(text)
        return v / np.linalg.norm(v)

    def raw(self, text: str) -> np.ndarray:
        """Unnormalised integer counts; retrieval ranks on these so exact ties stay exact."""
        if not text:
            raise ValidationError("cannot embed empty text")
        return kernels.trigram_counts(text, self.dim)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])

    def raw_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.raw(t) for t in texts])


class HttpEmbedder:
    """Client for an embedding service: POST {"texts": [...]} -> {"vectors": [...], "dim": D}."""

    def __init__(
        self,
        endpoint: str,
        dim: int | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        batch_size: int = 64,
        client: httpx.Client | None = None,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout
        self.max_retries = max_retries
        self.batch_size = batch_size
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self.embedder_id = f"http:{endpoint}"

    def _post(self, texts: list[str]) -> dict:
        last: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self._client.post(self.endpoint, json={"texts": texts}, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                if attempt + 1 < self.max_retries and self.backoff:
                    time.sleep(self.backoff * 2**attempt)
        raise EmbeddingError(f"embedding service failed after {self.max_retries} attempts: {last}")

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if any(not t for t in texts):
            raise ValidationError("cannot embed empty text")
        chunks = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start : start + self.batch_size])
            data = self._post(batch)
            try:
                vectors = np.asarray(data["vectors"], dtype=np.float64)
                declared = int(data["dim"])
            except (KeyError, TypeError, ValueError) as exc:
                raise EmbeddingError(f"malformed embedding response: {exc}") from exc
            if self.dim is None:
                self.dim = declared
            if vectors.ndim != 2 or vectors.shape != (len(batch), declared) or declared != self.dim:
                raise ValidationError(
                    f"embedding dimension mismatch: expected {len(batch)}x{self.dim}, "
                    f"got {vectors.shape} (declared {declared})"
                )
            chunks.append(vectors)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.dim or 0))


_default_embedder = HashedTrigramEmbedder()


def embed(text: str, embedder: Embedder | None = None) -> np.ndarray:
    return (embedder or _default_embedder).embed_many([text])[0]


def _raw_vectors(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    raw_many = getattr(embedder, "raw_many", None)
    return np.asarray(raw_many(texts) if raw_many else embedder.embed_many(texts), dtype=np.float64)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class TripletRecord:
    head: str
    relation: str
    tail: str
    soft_label: EmotionDistribution
    embedding: np.ndarray = field(repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "relation": self.relation,
            "tail": self.tail,
            "soft_label": self.soft_label.to_dict(),
        }


@dataclass(frozen=True)
class ScoredTriplet:
    record: TripletRecord
    similarity: float
    index: int


@dataclass
class KnowledgeBase:
    records: tuple[TripletRecord, ...]
    embedder_id: str
    dimension: int
    embedder: Embedder = field(repr=False, compare=False)
    raw: np.ndarray | None = field(default=None, repr=False, compare=False)
    matrix: np.ndarray = field(init=False, repr=False, compare=False)
    sqnorms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.records:
            raise IngestError("knowledge base is empty")
        m = np.stack([r.embedding for r in self.records]).astype(np.float64)
        raw = m if self.raw is None else np.asarray(self.raw, dtype=np.float64)
        if m.shape[1] != self.dimension or raw.shape != m.shape:
            raise ValidationError(f"embeddings have shape {raw.shape}, expected ({len(self.records)}, {self.dimension})")
        self.raw = np.ascontiguousarray(raw)
        self.sqnorms = np.ascontiguousarray(np.einsum("ij,ij->i", raw, raw))
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        self.matrix = np.ascontiguousarray(np.divide(m, norms, out=np.zeros_like(m), where=norms > 0))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.records[0].soft_label.class_names


def load_lexicon(path: str | Path | None) -> dict[str, list[float]]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid lexicon JSON at line {exc.lineno}") from exc
    if not isinstance(data, dict):
        raise IngestError(f"{path}: lexicon must be an object of term -> probabilities")
    return {str(k): list(v) for k, v in data.items()}


def _checked_label(values: Sequence[float], class_names: Sequence[str], where: str) -> EmotionDistribution:
    vals = [float(v) for v in values]
    if len(vals) != len(class_names):
        raise ValidationError(f"{where}: expected {len(class_names)} label values, got {len(vals)}")
    if any(v < 0 or not math.isfinite(v) for v in vals):
        raise ValidationError(f"{where}: label values must be finite and non-negative")
    if abs(math.fsum(vals) - 1.0) > LABEL_SUM_TOL:
        raise ValidationError(f"{where}: soft label sums to {math.fsum(vals)}, not 1")
    return EmotionDistribution.normalized(class_names, vals)


def _soft_label(
    rec: dict, lexicon: dict[str, list[float]], lower_lexicon: dict[str, list[float]],
    class_names: Sequence[str], where: str,
) -> EmotionDistribution:
    if "pos" in rec or "neg" in rec:
        if len(class_names) != 2:
            raise ValidationError(f"{where}: pos/neg labels need a binary task")
        return _checked_label([rec.get("pos", 0.0), rec.get("neg", 0.0)], class_names, where)
    if "probs" in rec:
        return _checked_label(rec["probs"], class_names, where)
    tail = rec["tail"]
    if tail in lexicon:
        return _checked_label(lexicon[tail], class_names, f"{where} (lexicon '{tail}')")
    if tail.lower() in lower_lexicon:
        return _checked_label(lower_lexicon[tail.lower()], class_names, f"{where} (lexicon '{tail}')")
    return EmotionDistribution.uniform(class_names)


def ingest_kb(
    path: str | Path,
    lexicon_path: str | Path | None = None,
    embedder: Embedder | None = None,
    class_names: Sequence[str] = BINARY_CLASSES,
) -> KnowledgeBase:
    """Load a triplet JSONL file and attach soft labels and head embeddings.

    Label precedence: explicit ``pos``/``neg`` (or ``probs``), then the lexicon
    entry for the tail, then uniform.
    """
    embedder = embedder or _default_embedder
    lexicon = load_lexicon(lexicon_path)
    lower_lexicon = {k.lower(): v for k, v in lexicon.items()}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            where = f"{path}:{lineno}"
            if not isinstance(rec, dict) or not all(isinstance(rec.get(f), str) for f in ("head", "relation", "tail")):
                raise IngestError(f"{where}: record needs string head, relation, tail")
            if not rec["head"].strip():
                raise IngestError(f"{where}: empty head")
            rows.append((rec, _soft_label(rec, lexicon, lower_lexicon, class_names, where)))
    if not rows:
        raise IngestError(f"{path}: no triplets")
    heads = [rec["head"] for rec, _ in rows]
    raw = _raw_vectors(embedder, heads)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    vectors = np.divide(raw, norms, out=np.zeros_like(raw), where=norms > 0)
    records = tuple(
        TripletRecord(rec["head"], rec["relation"], rec["tail"], label, vec)
        for (rec, label), vec in zip(rows, vectors)
    )
    return KnowledgeBase(records, embedder.embedder_id, int(vectors.shape[1]), embedder, raw)


def retrieve(kb: KnowledgeBase, query_text: str, k: int = 1) -> list[ScoredTriplet]:
    """Top-``k`` records by cosine similarity of head embeddings; ties keep KB order."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    q = np.ascontiguousarray(_raw_vectors(kb.embedder, [query_text])[0])
    if q.shape != (kb.dimension,):
        raise ValidationError(f"query embedding has shape {q.shape}, expected ({kb.dimension},)")
    q_sq = float(np.dot(q, q))
    idx, dots = kernels.topk_cosine(kb.raw, kb.sqnorms, q, k)
    out = []
    for i, d in zip(idx, dots):
        denom = math.sqrt(q_sq * kb.sqnorms[i])
        sim = d / denom if denom > 0 else 0.0
        out.append(ScoredTriplet(kb.records[i], float(min(1.0, max(-1.0, sim))), int(i)))
    return out
