"""numba versions of the hot kernels.

Plain sequential loops, no fastmath and no parallel reductions, so the
summation order is fixed per output element and rows stay independent.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def linear(x, w):
    n, d = x.shape
    m = w.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                acc += x[i, t] * w[t, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def attention(q, k, v, bias, scale):
    h, nq, dh = q.shape
    nk = k.shape[1]
    out = np.zeros((h, nq, dh))
    probs = np.empty((h, nq, nk))
    row = np.empty(nk)
    for hh in range(h):
        for i in range(nq):
            top = -np.inf
            for j in range(nk):
                acc = 0.0
                for t in range(dh):
                    acc += q[hh, i, t] * k[hh, j, t]
                s = acc * scale + bias[i, j]
                row[j] = s
                if s > top:
                    top = s
            if top == -np.inf:
                raise ValueError("attention row has every key masked")
            total = 0.0
            for j in range(nk):
                e = math.exp(row[j] - top)
                row[j] = e
                total += e
            for j in range(nk):
                p = row[j] / total
                probs[hh, i, j] = p
                for t in range(dh):
                    out[hh, i, t] += p * v[hh, j, t]
    return out, probs


@njit(cache=True)
def rank_counts(c):
    n = c.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        cnt = 0
        for j in range(n):
            if c[i] >= c[j]:
                cnt += 1
        out[i] = cnt
    return out


@njit(cache=True)
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@njit(cache=True)
def pairwise_sigmoid(c, tau):
    n = c.shape[0]
    s = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                s[i, j] = 1.0
            else:
                s[i, j] = _sigmoid((c[i] - c[j]) / tau)
    return s
