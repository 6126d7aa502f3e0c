"""Pure numpy implementations of the hot kernels.

These are the reference behaviour; ``_kernels.pyx`` must agree with them.
"""
from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def trigram_counts(text: str, dim: int) -> np.ndarray:
    """Hashed character-trigram counts of ``" " + text.lower() + " "``.

    Each trigram is hashed as the 12 bytes of its three UTF-32LE code points.
    """
    padded = " " + text.lower() + " "
    cps = np.frombuffer(padded.encode("utf-32-le"), dtype="<u4").astype(np.uint64)
    n = cps.size - 2
    out = np.zeros(dim, dtype=np.float64)
    if n <= 0:
        return out
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for j in range(3):
        c = cps[j : j + n]
        for k in range(4):
            h ^= (c >> np.uint64(8 * k)) & np.uint64(0xFF)
            h *= prime
    buckets = (h % np.uint64(dim)).astype(np.int64)
    out += np.bincount(buckets, minlength=dim)
    return out


def token_counts(text: str, dim: int) -> np.ndarray:
    """Hashed counts of lowercase whitespace tokens (FNV-1a over UTF-8)."""
    out = np.zeros(dim, dtype=np.float64)
    for tok in text.lower().split():
        out[fnv1a64(tok.encode("utf-8")) % dim] += 1.0
    return out


def topk_cosine(
    matrix: np.ndarray, sqnorms: np.ndarray, query: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rows with the ``k`` largest cosine similarities to ``query``.

    Rows are ranked by ``d * |d| / sqnorm`` with ``d = row . query``, which
    orders like cosine for a fixed query. With integer-valued vectors ``d`` and
    ``sqnorm`` are exact, so equal cosines give bit-equal keys and ties go to
    the lower row index. Zero rows get key 0. Returns indices and raw dots.
    """
    n = matrix.shape[0]
    k = min(k, n)
    dots = matrix @ query
    safe = np.where(sqnorms > 0, sqnorms, 1.0)
    keys = np.where(sqnorms > 0, dots * np.abs(dots) / safe, 0.0)
    order = np.lexsort((np.arange(n), -keys))[:k]
    return order.astype(np.int64), dots[order]


def apply_policy_updates(
    logits: np.ndarray,
    support: np.ndarray,
    actions: np.ndarray,
    advantages: np.ndarray,
    lr: float,
) -> None:
    """Sequential in-place REINFORCE steps restricted to ``support``.

    For each (action, advantage): logits += lr * A * (onehot(a) - softmax(logits)),
    where softmax and the update only touch entries with ``support != 0``.
    """
    idx = np.flatnonzero(support)
    for a, adv in zip(actions, advantages):
        z = logits[idx]
        e = np.exp(z - z.max())
        p = e / e.sum()
        step = -lr * adv * p
        logits[idx] += step
        logits[a] += lr * adv
