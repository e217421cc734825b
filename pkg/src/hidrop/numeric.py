"""Dense 64-bit numeric substrate: cosine, masked softmax, RoPE, seeded weights.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order.

Random weights come from numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence``. A seed is either an int or a tuple of ints
(e.g. ``(model_seed, layer, tensor_id)``), which gives every tensor its own
independent, platform-stable stream. Values are drawn with
``Generator.uniform(-scale, scale, size=(rows, cols))`` and fill the matrix
in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

Seed = Union[int, Sequence[int]]


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"cosine needs two vectors of equal length, got {u.shape} and {v.shape}")
    nu = float(np.sqrt(np.dot(u, u)))
    nv = float(np.sqrt(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero-norm vector is undefined")
    c = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, c))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of two (n, d) arrays, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine of a zero-norm vector is undefined")
    return np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)


def softmax(row, mask=None) -> np.ndarray:
    """Max-stabilised softmax; ``mask`` marks entries to keep (True) or drop."""
    x = np.asarray(row, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax expects a non-empty vector")
    keep = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != x.shape:
        raise ValueError("mask length must match the row")
    if not keep.any():
        raise ValueError("softmax with every entry masked")
    out = np.zeros_like(x)
    z = x[keep] - x[keep].max()
    e = np.exp(z)
    out[keep] = e / e.sum()
    return out


def sigmoid(z):
    """Overflow-free logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"rope base must exceed 1, got {self.base}")

    def inv_freq(self) -> np.ndarray:
        k = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * k / self.head_dim)


def rope_rotate(x, position, params: RopeParams) -> np.ndarray:
    """Rotate interleaved pairs ``(x[2k], x[2k+1])`` by ``position * base**(-2k/d)``.

    ``x`` has trailing dimension ``head_dim``; ``position`` broadcasts against
    ``x.shape[:-1]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ValueError("rope_rotate needs an even trailing dimension")
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"expected head_dim {params.head_dim}, got {x.shape[-1]}")
    pos = np.asarray(position, dtype=np.float64)[..., None]
    angle = pos * params.inv_freq()
    cos, sin = np.cos(angle), np.sin(angle)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, angle.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def seeded_matrix(rows: int, cols: int, seed: Seed, scale: float = 1.0) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return rng.uniform(-scale, scale, size=(rows, cols))
