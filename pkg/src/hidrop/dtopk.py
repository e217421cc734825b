"""Differentiable top-k: normalized ranks, sigmoid soft mask, hard forward selection.

Two rank variants are provided:

``hard``
    ``rank_i = (1/n) * #{j : c_i >= c_j}``. Exact counting, so the mask is
    differentiable in the pruning ratio ``a`` only; the score gradient is
    defined as zero.
``soft``
    The indicator for ``j != i`` is replaced by ``sigmoid((c_i - c_j) / tau)``.
    The self term stays at 1 (a token always ties itself), so the surrogate
    tends to the hard rank as ``tau -> 0`` on tie-free scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from hidrop import kernels
from hidrop.numeric import sigmoid

HARD = "hard"
SOFT = "soft"


def _scores(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if not np.all(np.isfinite(c)):
        raise ValueError("scores must be finite")
    return c


def _default_tau(n: int) -> float:
    return 1.0 / n


def normalized_rank(c, variant: str = HARD, tau: Optional[float] = None) -> np.ndarray:
    c = _scores(c)
    n = c.size
    if variant == HARD:
        return kernels.rank_counts(c) / n
    if variant == SOFT:
        tau = _default_tau(n) if tau is None else tau
        if not tau > 0:
            raise ValueError(f"soft rank temperature must be positive, got {tau}")
        return kernels.pairwise_sigmoid(c, tau).sum(axis=1) / n
    raise ValueError(f"unknown rank variant {variant!r}")


@dataclass(frozen=True)
class SoftMask:
    scores: np.ndarray
    ranks: np.ndarray
    soft_values: np.ndarray
    hard_keep: np.ndarray
    a: float
    lam: float
    variant: str = HARD
    tau: Optional[float] = None

    @property
    def n(self) -> int:
        return int(self.scores.size)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.hard_keep)


def soft_mask(
    c,
    a: float,
    lam: Optional[float] = None,
    variant: str = HARD,
    tau: Optional[float] = None,
) -> SoftMask:
    """Build the mask ``sigmoid(lam * (rank - a))``.

    ``lam`` defaults to the number of candidates. The hard keep bit is the
    sigmoid thresholded at 0.5, i.e. ``rank > a``.
    """
    c = _scores(c)
    n = c.size
    if not 0.0 <= a < 1.0:
        raise ValueError(f"pruning ratio a must lie in [0, 1), got {a}")
    lam = float(n) if lam is None else float(lam)
    if not lam > 0:
        raise ValueError(f"temperature lambda must be positive, got {lam}")
    if variant == SOFT and tau is None:
        tau = _default_tau(n)
    ranks = normalized_rank(c, variant, tau)
    gap = ranks - a
    soft = sigmoid(lam * gap)
    # same decision as soft > 0.5, without relying on sigmoid rounding near 0
    hard = gap > 0
    return SoftMask(c, ranks, soft, hard, float(a), lam, variant, tau)


def keep_count_to_ratio(k: int, n: int) -> float:
    """Ratio ``a`` leaving exactly ``k`` of ``n`` tie-free hard ranks above it."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 < k <= n:
        raise ValueError(f"keep count must satisfy 0 < k <= n, got k={k}, n={n}")
    return (n - k) / n + 1.0 / (2 * n)


def mask_gradients(mask: SoftMask, variant: Optional[str] = None):
    """Analytic gradients of the soft values.

    Returns ``(d_a, d_c)``: ``d_a[i] = d soft_i / d a`` and
    ``d_c[i, j] = d soft_i / d c_j``. Under the hard variant ``d_c`` is zero.
    """
    variant = mask.variant if variant is None else variant
    if variant != mask.variant:
        raise ValueError(f"mask was built with {mask.variant!r}, asked for {variant!r}")
    s = mask.soft_values
    slope = mask.lam * s * (1.0 - s)
    d_a = -slope
    n = mask.n
    if variant == HARD:
        return d_a, np.zeros((n, n))
    tau = mask.tau
    pair = kernels.pairwise_sigmoid(mask.scores, tau)
    dpair = pair * (1.0 - pair) / tau
    np.fill_diagonal(dpair, 0.0)
    # d rank_i / d c_j = -dpair[i, j] / n for j != i, sum_j dpair[i, j] / n for j == i
    drank = -dpair / n
    drank[np.diag_indices(n)] = dpair.sum(axis=1) / n
    return d_a, slope[:, None] * drank


def select_exact(mask: SoftMask, k: int) -> np.ndarray:
    """Indices of exactly ``k`` survivors, ascending.

    Starts from the hard keep set. When ties at the threshold make the count
    differ from ``k``, candidates are ordered by rank (descending) then by
    original index (ascending) and the first ``k`` are taken.
    """
    n = mask.n
    if not 0 <= k <= n:
        raise ValueError(f"cannot keep {k} of {n} tokens")
    kept = mask.kept
    if kept.size == k:
        return kept
    order = np.lexsort((np.arange(n), -mask.ranks))
    return np.sort(order[:k])
