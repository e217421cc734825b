"""Backend selection for the hot numeric kernels.

``HIDROP_KERNELS`` picks the implementation at import time:

* ``auto`` (default): numba if it imports, otherwise numpy
* ``numba``: require numba, fail loudly if missing
* ``numpy``: pure-numpy fallback, no JIT
"""

from __future__ import annotations

import os

_CHOICES = ("auto", "numba", "numpy")


def requested_backend() -> str:
    value = os.environ.get("HIDROP_KERNELS", "auto").strip().lower()
    if value not in _CHOICES:
        raise ValueError(f"HIDROP_KERNELS must be one of {_CHOICES}, got {value!r}")
    return value


try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAS_NUMBA = False


def resolve_backend() -> str:
    want = requested_backend()
    if want == "numpy":
        return "numpy"
    if want == "numba" and not HAS_NUMBA:
        raise ImportError("HIDROP_KERNELS=numba but numba is not installed")
    return "numba" if HAS_NUMBA else "numpy"


BACKEND = resolve_backend()
