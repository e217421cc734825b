"""Layer-wise probes over traces: intra-modal drift, cross-modal influence, ILVAS.

Conventions
-----------
* ``s_intra`` returns one value per transition ``l -> l+1`` for
  ``l = 0..L-1``. Only tokens live at both layers count; a transition with no
  such token in any sample is NaN.
* ``s_cross`` mean-pools the instruction (textual) tokens at each layer, then
  takes the cosine between the mismatched and reference pooled vectors.
* The head-wise attention vector of a vision token is the length-H vector of
  per-head mean attention it receives from the stored text-token queries.
  ILVAS ranks vision tokens by the head mean of that vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from hidrop.numeric import cosine_rows
from hidrop.trace import TEXTUAL, VISUAL, LayerTrace

EXACT = "exact"
AGGREGATE = "aggregate"


def s_intra(traces: Sequence[LayerTrace], modality: str) -> np.ndarray:
    traces = list(traces)
    if not traces:
        raise ValueError("s_intra needs at least one trace")
    num_layers = traces[0].num_layers
    per_sample = []
    for tr in traces:
        if tr.num_layers != num_layers:
            raise ValueError("all traces must have the same depth")
        members = tr.indices(modality)
        if members.size == 0:
            raise ValueError(f"modality {modality!r} absent from sample {tr.sample_id!r}")
        row = np.full(num_layers, np.nan)
        for layer in range(num_layers):
            both = np.intersect1d(tr.live_subset(layer, members), tr.live[layer + 1])
            if both.size:
                row[layer] = cosine_rows(tr.rows(layer, both), tr.rows(layer + 1, both)).mean()
        per_sample.append(row)
    return _nanmean_rows(np.array(per_sample))


def _nanmean_rows(a: np.ndarray) -> np.ndarray:
    counts = np.sum(~np.isnan(a), axis=0)
    sums = np.nansum(a, axis=0)
    out = np.full(a.shape[1], np.nan)
    ok = counts > 0
    out[ok] = sums[ok] / counts[ok]
    return out


def instruction_vector(trace: LayerTrace, layer: int) -> np.ndarray:
    idx = trace.live_subset(layer, trace.indices(TEXTUAL))
    return trace.rows(layer, idx).mean(axis=0)


def s_cross(pairs: Iterable[tuple]) -> np.ndarray:
    """Per-layer similarity of instruction representations, mismatched vs reference."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("s_cross needs at least one (mismatched, reference) pair")
    rows = []
    for mis, ref in pairs:
        if mis.pairing not in (None, "mismatched") or ref.pairing not in (None, "reference"):
            raise ValueError("pair must be ordered (mismatched, reference)")
        if len(mis.indices(TEXTUAL)) != len(ref.indices(TEXTUAL)):
            raise ValueError(
                f"instruction spans differ: {len(mis.indices(TEXTUAL))} vs {len(ref.indices(TEXTUAL))} tokens")
        if mis.num_layers != ref.num_layers:
            raise ValueError("paired traces must have the same depth")
        a = np.array([instruction_vector(mis, l) for l in range(mis.num_layers + 1)])
        b = np.array([instruction_vector(ref, l) for l in range(ref.num_layers + 1)])
        rows.append(cosine_rows(a, b))
    return np.mean(rows, axis=0)


def received_attention(trace: LayerTrace, layer: int):
    """(vision token indices, H-vectors of mean attention received from text queries)."""
    if not trace.has_attention(layer):
        raise ValueError(f"no attention recorded at layer {layer} of {trace.sample_id!r}")
    att = trace.attention[layer]
    live = trace.live[layer]
    queries = trace.query_indices(layer)
    text_q = np.array([trace.modality_of(int(q)) == TEXTUAL for q in queries])
    if not text_q.any():
        raise ValueError(f"no text queries stored at layer {layer}")
    vis_cols = np.array([trace.modality_of(int(k)) == VISUAL for k in live], dtype=bool)
    received = att[:, text_q][:, :, vis_cols].mean(axis=1)  # (H, n_vis)
    return live[vis_cols], received.T


def ilvas_single(trace: LayerTrace, layer: int, n: int, k: int) -> float:
    vis_a, A = received_attention(trace, layer)
    vis_b, B = received_attention(trace, layer + n)
    if k < 1 or k > vis_a.size:
        raise ValueError(f"top-K={k} exceeds the {vis_a.size} live vision tokens at layer {layer}")
    strength = A.mean(axis=1)
    top = np.lexsort((vis_a, -strength))[:k]
    chosen = vis_a[top]
    pos_b = np.searchsorted(vis_b, chosen)
    if np.any(pos_b >= vis_b.size) or np.any(vis_b[np.minimum(pos_b, vis_b.size - 1)] != chosen):
        raise ValueError(f"top-K vision tokens of layer {layer} are not all live at layer {layer + n}")
    return float(cosine_rows(A[top], B[pos_b]).mean())


def ilvas(traces: Sequence[LayerTrace], layer: int, n: int, k: int) -> float:
    """Mean over samples of the top-K head-wise attention cosine between ``layer`` and ``layer + n``."""
    traces = list(traces)
    if not traces:
        raise ValueError("ilvas needs at least one trace")
    if n < 1:
        raise ValueError("window n must be >= 1")
    return float(np.mean([ilvas_single(tr, layer, n, k) for tr in traces]))


@dataclass(frozen=True)
class IlvasCurve:
    layers: np.ndarray
    scores: np.ndarray
    n: int
    k: int
    mode: str = EXACT

    def value(self, layer: int) -> float:
        hit = np.flatnonzero(self.layers == layer)
        if hit.size == 0:
            raise KeyError(layer)
        return float(self.scores[hit[0]])


def ilvas_curve(traces: Sequence[LayerTrace], layers: Iterable[int], n: int, k: int,
                mode: str = EXACT) -> IlvasCurve:
    """ILVAS per layer; ``aggregate`` averages offsets ``1..n`` instead of using ``n`` only."""
    layers = np.array(list(layers), dtype=np.int64)
    if mode == EXACT:
        scores = [ilvas(traces, int(l), n, k) for l in layers]
    elif mode == AGGREGATE:
        scores = [np.mean([ilvas(traces, int(l), o, k) for o in range(1, n + 1)]) for l in layers]
    else:
        raise ValueError(f"unknown ILVAS mode {mode!r}")
    return IlvasCurve(layers, np.array(scores, dtype=np.float64), n, k, mode)


def select_filter_layers(curve: IlvasCurve, window: Optional[tuple] = None,
                         valleys: bool = False) -> list:
    """Local maxima of the curve inside ``window = (lo, hi)`` (inclusive).

    A run of equal values counts once, at its leftmost layer, when both
    neighbours are lower. A run touching a window edge only needs its inner
    neighbour to be lower. ``valleys=True`` looks for local minima instead.
    """
    lo, hi = (int(curve.layers.min()), int(curve.layers.max())) if window is None else map(int, window)
    if hi - lo + 1 < 3:
        raise ValueError(f"window [{lo}, {hi}] is shorter than 3 layers")
    layers = np.arange(lo, hi + 1)
    try:
        vals = np.array([curve.value(int(l)) for l in layers])
    except KeyError as exc:
        raise ValueError(f"curve does not cover layer {exc.args[0]} of the window") from None
    if not np.all(np.isfinite(vals)):
        raise ValueError("curve has non-finite values inside the window")
    if valleys:
        vals = -vals
    picked = []
    i = 0
    while i < len(vals):
        j = i
        while j + 1 < len(vals) and vals[j + 1] == vals[i]:
            j += 1
        left_ok = i == 0 or vals[i - 1] < vals[i]
        right_ok = j == len(vals) - 1 or vals[j + 1] < vals[i]
        if left_ok and right_ok:
            picked.append(int(layers[i]))
        i = j + 1
    return picked
