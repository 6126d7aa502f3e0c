# cython: language_level=3
"""Compiled versions of the kernels in ``_pykernels``; same signatures, same results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _mix_cp(uint64_t h, Py_UCS4 cp) noexcept nogil:
    cdef int k
    for k in range(4):
        h ^= (<uint64_t>cp >> (8 * k)) & 0xFF
        h *= FNV_PRIME
    return h


def fnv1a64(bytes data):
    cdef uint64_t h = FNV_OFFSET
    cdef unsigned char b
    for b in data:
        h ^= b
        h *= FNV_PRIME
    return h


def trigram_counts(str text, Py_ssize_t dim):
    cdef str padded = " " + text.lower() + " "
    cdef Py_ssize_t n = len(padded)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(dim, dtype=np.float64)
    cdef double[::1] view = out
    cdef Py_UCS4 a, b, c
    cdef uint64_t h
    cdef Py_ssize_t i
    if n < 3:
        return out
    a = padded[0]
    b = padded[1]
    for i in range(2, n):
        c = padded[i]
        h = _mix_cp(_mix_cp(_mix_cp(FNV_OFFSET, a), b), c)
        view[h % <uint64_t>dim] += 1.0
        a = b
        b = c
    return out


def token_counts(str text, Py_ssize_t dim):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(dim, dtype=np.float64)
    cdef double[::1] view = out
    cdef bytes raw
    cdef const unsigned char[:] buf
    cdef uint64_t h
    cdef Py_ssize_t j
    for tok in text.lower().split():
        raw = tok.encode("utf-8")
        buf = raw
        h = FNV_OFFSET
        for j in range(buf.shape[0]):
            h ^= buf[j]
            h *= FNV_PRIME
        view[h % <uint64_t>dim] += 1.0
    return out


def topk_cosine(const double[:, ::1] matrix, const double[::1] sqnorms,
                const double[::1] query, Py_ssize_t k):
    cdef Py_ssize_t n = matrix.shape[0], d = matrix.shape[1]
    cdef Py_ssize_t i, j, pos, filled = 0
    cdef double s, key
    if k > n:
        k = n
    idx_arr = np.empty(k, dtype=np.int64)
    dot_arr = np.empty(k, dtype=np.float64)
    cdef int64_t[::1] idx = idx_arr
    cdef double[::1] dots = dot_arr
    cdef double[::1] keys = np.empty(max(k, 1), dtype=np.float64)
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += matrix[i, j] * query[j]
            key = s * fabs(s) / sqnorms[i] if sqnorms[i] > 0 else 0.0
            # strict > keeps earlier rows ahead on ties
            if filled == k and not (key > keys[k - 1]):
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and key > keys[pos - 1]:
                if pos < k:
                    keys[pos] = keys[pos - 1]
                    dots[pos] = dots[pos - 1]
                    idx[pos] = idx[pos - 1]
                pos -= 1
            keys[pos] = key
            dots[pos] = s
            idx[pos] = i
            if filled < k:
                filled += 1
    return idx_arr, dot_arr


def apply_policy_updates(double[::1] logits, const unsigned char[::1] support,
                         const int64_t[::1] actions, const double[::1] advantages,
                         double lr):
    cdef Py_ssize_t m = logits.shape[0], t, j
    cdef double zmax, total, adv
    cdef int64_t a
    cdef double[::1] p = np.empty(m, dtype=np.float64)
    with nogil:
        for t in range(actions.shape[0]):
            a = actions[t]
            adv = advantages[t]
            zmax = -1e308
            for j in range(m):
                if support[j] and logits[j] > zmax:
                    zmax = logits[j]
            total = 0.0
            for j in range(m):
                if support[j]:
                    p[j] = exp(logits[j] - zmax)
                    total += p[j]
            for j in range(m):
                if support[j]:
                    logits[j] += -lr * adv * (p[j] / total)
            logits[a] += lr * adv
