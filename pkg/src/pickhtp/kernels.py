"""Hot-loop kernels, compiled when available.

The Cython extension ``pickhtp._kernels`` is used if it was built; otherwise
the numpy versions in ``pickhtp._pykernels`` are used. Set
``PICKHTP_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

if os.environ.get("PICKHTP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

fnv1a64 = _impl.fnv1a64
trigram_counts = _impl.trigram_counts
token_counts = _impl.token_counts
topk_cosine = _impl.topk_cosine
apply_policy_updates = _impl.apply_policy_updates

__all__ = [
    "BACKEND",
    "fnv1a64",
    "trigram_counts",
    "token_counts",
    "topk_cosine",
    "apply_policy_updates",
]
