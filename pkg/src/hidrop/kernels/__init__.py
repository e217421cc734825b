"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active backend is fixed at import time from ``HIDROP_KERNELS``
(see :mod:`hidrop._accel`). Both backends are exposed as submodules so the
benchmark and the cross-backend tests can call either one directly.
"""

from __future__ import annotations

import numpy as np

from hidrop._accel import BACKEND
from hidrop.kernels import _numpy as numpy_impl

if BACKEND == "numba":
    from hidrop.kernels import _jit as _impl
else:
    _impl = numpy_impl


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def linear(x, w) -> np.ndarray:
    """Row-wise ``x @ w``; each output row depends only on its input row."""
    return _impl.linear(_f64(x), _f64(w))


def attention(q, k, v, bias, scale: float):
    """Multi-head attention with an additive (query x key) bias.

    ``q`` is (heads, nq, dh), ``k``/``v`` are (heads, nk, dh). ``bias`` may hold
    ``-inf`` to mask keys. Returns ``(out, probs)``.
    """
    return _impl.attention(_f64(q), _f64(k), _f64(v), _f64(bias), float(scale))


def rank_counts(c) -> np.ndarray:
    return _impl.rank_counts(_f64(c))


def pairwise_sigmoid(c, tau: float) -> np.ndarray:
    return _impl.pairwise_sigmoid(_f64(c), float(tau))


__all__ = ["BACKEND", "linear", "attention", "rank_counts", "pairwise_sigmoid", "numpy_impl"]
