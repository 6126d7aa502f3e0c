"""Compare the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import random
import timeit

import numpy as np

from pickhtp import _pykernels, kernels

try:
    from pickhtp import _kernels
except ImportError:
    _kernels = None

WORDS = ("house tree person door window roof chimney smoke trunk branch leaf root "
         "dark small large open closed broken heavy faint tall narrow wide lonely").split()


def workloads():
    rng = random.Random(0)
    texts = [" ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 12))) for _ in range(500)]
    matrix = np.stack([_pykernels.trigram_counts(t, 512) for t in texts] * 4)
    sqnorms = np.einsum("ij,ij->i", matrix, matrix)
    query = _pykernels.trigram_counts("a small dark house with a closed door", 512)
    nrng = np.random.default_rng(0)
    support = (nrng.random(64) < 0.8).astype(np.uint8)
    support[0] = 1
    actions = nrng.choice(np.flatnonzero(support), size=400).astype(np.int64)
    advantages = nrng.normal(size=400)

    def policy(mod):
        logits = np.zeros(64)
        mod.apply_policy_updates(logits, support, actions, advantages, 0.05)

    return {
        "trigram_counts x500": lambda m: [m.trigram_counts(t, 512) for t in texts],
        "token_counts x500": lambda m: [m.token_counts(t, 512) for t in texts],
        "topk_cosine 2000x512 k=10": lambda m: m.topk_cosine(matrix, sqnorms, query, 10),
        "apply_policy_updates x400": policy,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in workloads().items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<28}{py:>12.3f}{'-':>12}{'-':>10}")
            continue
        cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{py:>12.3f}{cy:>12.3f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
