"""Both kernel implementations against plain-Python oracles and each other."""
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pickhtp import _pykernels, kernels

from .conftest import _ckernels

MASK = (1 << 64) - 1


def fnv_oracle(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & MASK
    return h


def trigram_oracle(text, dim):
    padded = " " + text.lower() + " "
    out = np.zeros(dim)
    for i in range(len(padded) - 2):
        out[fnv_oracle(padded[i : i + 3].encode("utf-32-le")) % dim] += 1
    return out


def token_oracle(text, dim):
    out = np.zeros(dim)
    for tok in text.lower().split():
        out[fnv_oracle(tok.encode("utf-8")) % dim] += 1
    return out


def test_backend_selected():
    expected = "cython" if _ckernels is not None else "python"
    assert kernels.BACKEND in (expected, "python")


def test_fnv_known_vectors(kernel_impl):
    # published FNV-1a 64 test vectors
    assert kernel_impl.fnv1a64(b"") == 0xCBF29CE484222325
    assert kernel_impl.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert kernel_impl.fnv1a64(b"foobar") == 0x85944171F73967E8


@settings(max_examples=200, deadline=None)
@given(text=st.text(max_size=40))
def test_trigram_counts_match_oracle(text):
    want = trigram_oracle(text, 512)
    np.testing.assert_array_equal(_pykernels.trigram_counts(text, 512), want)
    if _ckernels is not None:
        np.testing.assert_array_equal(_ckernels.trigram_counts(text, 512), want)


@settings(max_examples=200, deadline=None)
@given(text=st.text(max_size=60))
def test_token_counts_match_oracle(text):
    want = token_oracle(text, 4096)
    np.testing.assert_array_equal(_pykernels.token_counts(text, 4096), want)
    if _ckernels is not None:
        np.testing.assert_array_equal(_ckernels.token_counts(text, 4096), want)


def exact_topk(matrix, query, k):
    """Rank rows by exact rational cosine ordering (d|d| / |row|^2), ties to the lower index."""
    keys = []
    for row in matrix:
        d = sum(Fraction(int(a)) * int(b) for a, b in zip(row, query))
        n2 = sum(int(a) ** 2 for a in row)
        keys.append(d * abs(d) / n2 if n2 else Fraction(0))
    return sorted(range(len(keys)), key=lambda i: (-keys[i], i))[:k]


@pytest.mark.parametrize("k", [1, 3, 10, 500])
def test_topk_cosine_matches_exact_oracle(kernel_impl, k):
    rng = np.random.default_rng(k)
    m = rng.integers(-2, 4, size=(300, 12)).astype(np.float64)
    m[17] = 0.0
    q = rng.integers(0, 3, size=12).astype(np.float64)
    sq = np.einsum("ij,ij->i", m, m)
    idx, dots = kernel_impl.topk_cosine(np.ascontiguousarray(m), sq, q, k)
    want = exact_topk(m, q, k)
    assert idx.tolist() == want
    np.testing.assert_array_equal(dots, m[want] @ q)


def test_topk_cosine_scaled_rows_tie(kernel_impl):
    # rows 1 and 3 point the same way as row 0, so all three have cosine 1
    m = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 5.0], [3.0, 6.0, 0.0]])
    sq = np.einsum("ij,ij->i", m, m)
    idx, _ = kernel_impl.topk_cosine(m, sq, np.array([1.0, 2.0, 0.0]), 4)
    assert idx.tolist() == [0, 1, 3, 2]


def test_topk_cosine_implementations_agree():
    if _ckernels is None:
        pytest.skip("extension not built")
    rng = np.random.default_rng(9)
    for _ in range(30):
        m = rng.poisson(0.5, size=(200, 64)).astype(np.float64)
        q = rng.poisson(0.5, size=64).astype(np.float64)
        sq = np.einsum("ij,ij->i", m, m)
        a = _pykernels.topk_cosine(m, sq, q, 15)
        b = _ckernels.topk_cosine(m, sq, q, 15)
        assert a[0].tolist() == b[0].tolist()
        np.testing.assert_array_equal(a[1], b[1])


def test_policy_update_implementations_agree():
    if _ckernels is None:
        pytest.skip("extension not built")
    rng = np.random.default_rng(3)
    for _ in range(50):
        logits = rng.normal(size=7)
        support = (rng.random(7) > 0.3).astype(np.uint8)
        support[0] = 1
        allowed = np.flatnonzero(support)
        actions = rng.choice(allowed, size=4).astype(np.int64)
        adv = rng.normal(size=4)
        a, b = logits.copy(), logits.copy()
        _pykernels.apply_policy_updates(a, support, actions, adv, 0.1)
        _ckernels.apply_policy_updates(b, support, actions, adv, 0.1)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(a[support == 0], logits[support == 0])


def test_policy_update_single_step_formula(kernel_impl):
    logits = np.array([0.3, -0.2, 0.5, 0.0])
    support = np.array([1, 1, 0, 1], dtype=np.uint8)
    before = logits.copy()
    kernel_impl.apply_policy_updates(logits, support, np.array([1], dtype=np.int64), np.array([2.0]), 0.1)
    z = before[[0, 1, 3]]
    p = np.exp(z) / np.exp(z).sum()
    onehot = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(logits[[0, 1, 3]], z + 0.1 * 2.0 * (onehot - p), atol=1e-14)
    assert logits[2] == before[2]
