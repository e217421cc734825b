"""Deterministic toy decoder running the full vision-token lifecycle.

Layers ``1..inject_layer-1`` see only system/text tokens. At ``inject_layer``
the vision tokens join with their raw embeddings (their KV can be produced by
a separate vision lane). At each filter layer an auxiliary attention pass
scores the live vision tokens and the survivors continue. From
``exit_layer`` on, no vision token remains.

Two execution modes give the same numbers at surviving positions:

``removal``
    pruned rows are physically dropped from the attention inputs.
``masking``
    the full sequence is kept and dead keys get an additive ``-inf``.

All linear algebra goes through :mod:`hidrop.kernels`, whose kernels are
row-independent. A token's result does not depend on which other rows share
the call, so the vision lane, the reference pass and the pruned pass agree
bit for bit wherever they compute the same rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from hidrop import kernels
from hidrop.dtopk import HARD, SoftMask
from hidrop.importance import SaliencyConfig, score_and_select
from hidrop.layout import COMPACTED, PeMode, SequenceLayout, apply_pe
from hidrop.numeric import RopeParams, rope_rotate, seeded_matrix
from hidrop.schedule import (
    CostModel,
    DECOUPLED,
    ModelShape,
    PruneSchedule,
    SERIAL,
    layer_token_counts,
    prefill_latency,
)
from hidrop.trace import TEXTUAL, VISUAL, LayerTrace, TraceToken

REMOVAL = "removal"
MASKING = "masking"

_EPS = 1e-6

# tensor ids for per-tensor seeding
_WQ, _WK, _WV, _WO, _WG, _WU, _WD, _N1, _N2 = range(9)
_EMBED, _UNEMBED, _FINAL_NORM = 1001, 1002, 1003


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray


@dataclass(frozen=True)
class ToyModel:
    shape: ModelShape
    layers: tuple
    final_norm: np.ndarray
    unembed: np.ndarray
    rope: RopeParams
    seed: int
    vision_bias: np.ndarray  # per-layer logit bias from non-vision queries onto vision keys

    @classmethod
    def build(cls, shape: ModelShape, seed: int = 0, vocab: int = 64, rope_base: float = 10000.0,
              vision_decay: float = 0.0) -> "ToyModel":
        """Seeded pre-norm SwiGLU decoder.

        ``vision_decay > 0`` adds a logit bias of ``-vision_decay * (layer - 1)``
        on vision keys for text queries, so deeper layers read less from vision.
        """
        d, m = shape.hidden, shape.ffn
        sd, sm = math.sqrt(3.0 / d), math.sqrt(3.0 / m)
        layers = []
        for li in range(shape.layers):
            w = lambda tid, r, c, s: seeded_matrix(r, c, (seed, li, tid), s)
            layers.append(LayerWeights(
                wq=w(_WQ, d, d, sd), wk=w(_WK, d, d, sd), wv=w(_WV, d, d, sd), wo=w(_WO, d, d, sd),
                w_gate=w(_WG, d, m, sd), w_up=w(_WU, d, m, sd), w_down=w(_WD, m, d, sm),
                norm_attn=1.0 + w(_N1, 1, d, 0.1)[0], norm_ffn=1.0 + w(_N2, 1, d, 0.1)[0],
            ))
        final_norm = 1.0 + seeded_matrix(1, d, (seed, _FINAL_NORM), 0.1)[0]
        unembed = seeded_matrix(d, vocab, (seed, _UNEMBED), sd)
        bias = -float(vision_decay) * np.arange(shape.layers, dtype=np.float64)
        return cls(shape, tuple(layers), final_norm, unembed, RopeParams(shape.head_dim, rope_base),
                   seed, bias)

    @property
    def num_layers(self) -> int:
        return self.shape.layers


def make_embeddings(layout: SequenceLayout, hidden: int, seed: int = 0) -> np.ndarray:
    """Synthetic input embeddings; vision rows stand in for projector output."""
    return seeded_matrix(len(layout), hidden, (seed, _EMBED), 1.0)


# ------------------------------------------------------------------ primitives


def rmsnorm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / np.sqrt(ms + _EPS) * scale


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, h, d // h).transpose(1, 0, 2))


def _merge(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * dh))


def project_qkv(model: ToyModel, layer: int, x: np.ndarray, positions: np.ndarray):
    """Unrotated per-head Q and V plus rotated K for rows ``x`` at 1-based ``layer``.

    Returns ``(q_raw, k_raw, v)``; rotate with :func:`rotate`.
    """
    w = model.layers[layer - 1]
    xn = rmsnorm(x, w.norm_attn)
    h = model.shape.heads
    return (_heads(kernels.linear(xn, w.wq), h),
            _heads(kernels.linear(xn, w.wk), h),
            _heads(kernels.linear(xn, w.wv), h))


def rotate(model: ToyModel, x: np.ndarray, positions) -> np.ndarray:
    return rope_rotate(x, np.asarray(positions)[None, :], model.rope)


def _finish_block(model: ToyModel, layer: int, x, q, k, v, bias):
    w = model.layers[layer - 1]
    out, probs = kernels.attention(q, k, v, bias, 1.0 / math.sqrt(model.shape.head_dim))
    x = x + kernels.linear(_merge(out), w.wo)
    xn = rmsnorm(x, w.norm_ffn)
    gate = kernels.linear(xn, w.w_gate)
    up = kernels.linear(xn, w.w_up)
    act = gate / (1.0 + np.exp(-gate)) * up
    return x + kernels.linear(act, w.w_down), probs


def _bias(model: ToyModel, layer: int, q_idx, k_idx, modalities, key_alive=None) -> np.ndarray:
    q_idx = np.asarray(q_idx)
    k_idx = np.asarray(k_idx)
    allowed = k_idx[None, :] <= q_idx[:, None]
    if key_alive is not None:
        allowed &= key_alive[None, :]
    bias = np.where(allowed, 0.0, -np.inf)
    vb = model.vision_bias[layer - 1]
    if vb != 0.0:
        qv = modalities[q_idx] == VISUAL
        kv = modalities[k_idx] == VISUAL
        bias = bias + np.where(~qv[:, None] & kv[None, :], vb, 0.0)
    return bias


def logits_of(model: ToyModel, rows: np.ndarray) -> np.ndarray:
    return kernels.linear(rmsnorm(np.atleast_2d(rows), model.final_norm), model.unembed)


def reference_forward(model: ToyModel, embeddings: np.ndarray, positions, modalities,
                      indices=None) -> np.ndarray:
    """Plain causal transformer over the given rows; returns (L + 1, n, d) states."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    positions = np.asarray(positions)
    modalities = np.asarray(modalities)
    full_mods = np.empty(int(indices.max()) + 1, dtype=modalities.dtype)
    full_mods[indices] = modalities
    states = [x]
    for layer in range(1, model.num_layers + 1):
        q, k, v = project_qkv(model, layer, x, positions)
        q, k = rotate(model, q, positions), rotate(model, k, positions)
        x, _ = _finish_block(model, layer, x, q, k, v, _bias(model, layer, indices, indices, full_mods))
        states.append(x)
    return np.array(states)


# ------------------------------------------------------------------ KV cache


@dataclass
class KvCache:
    """Per-layer rotated keys and values, addressed by global token index."""

    index: Dict[int, np.ndarray] = field(default_factory=dict)
    keys: Dict[int, np.ndarray] = field(default_factory=dict)
    values: Dict[int, np.ndarray] = field(default_factory=dict)

    def put(self, layer: int, index, k, v) -> None:
        self.index[layer] = np.asarray(index)
        self.keys[layer] = k
        self.values[layer] = v

    def keep(self, layer: int, survivors) -> None:
        """Index-only pruning: select rows, never recompute them."""
        pos = np.searchsorted(self.index[layer], survivors)
        self.index[layer] = self.index[layer][pos]
        self.keys[layer] = self.keys[layer][:, pos]
        self.values[layer] = self.values[layer][:, pos]

    def rows(self, layer: int, tokens):
        pos = np.searchsorted(self.index[layer], tokens)
        return self.keys[layer][:, pos], self.values[layer][:, pos]


@dataclass(frozen=True)
class VisionKV:
    """Vision-lane output: keys/values of the vision block at the injection layer."""

    layer: int
    index: np.ndarray
    keys: np.ndarray
    values: np.ndarray


def vision_lane(model: ToyModel, layout: SequenceLayout, embeddings: np.ndarray,
                inject_layer: int) -> VisionKV:
    """Project the vision embeddings into the injection layer's K/V once."""
    vis = layout.vision
    pos = layout.positions[vis]
    _, k, v = project_qkv(model, inject_layer, np.asarray(embeddings)[vis], pos)
    return VisionKV(inject_layer, vis, rotate(model, k, pos), v)


# ------------------------------------------------------------------ forward


@dataclass
class ForwardResult:
    hidden: np.ndarray            # (L + 1, T, d); rows of dead tokens are stale
    layout: SequenceLayout        # carries live_at (L + 1, T)
    positions: np.ndarray         # (L + 1, T) position ids used at each layer
    logits: np.ndarray            # (vocab,) for the final token
    text_logits: np.ndarray       # (n_text, vocab)
    masks: Dict[int, SoftMask]
    survivors: Dict[int, np.ndarray]
    kv: KvCache
    attention: Optional[List[Optional[np.ndarray]]] = None
    attention_queries: Optional[List[Optional[np.ndarray]]] = None

    @property
    def live_at(self) -> np.ndarray:
        return self.layout.live_at

    def vision_counts(self) -> np.ndarray:
        vis = self.layout.modalities == VISUAL
        return self.live_at[1:, vis].sum(axis=1)


def forward(model: ToyModel, layout: SequenceLayout, embeddings: np.ndarray,
            sched: PruneSchedule, cfg: SaliencyConfig = SaliencyConfig(), pe: PeMode = PeMode(),
            mode: str = REMOVAL, *, train_soft_scale: bool = False, variant: str = HARD,
            lam: Optional[float] = None, vision_kv: Optional[VisionKV] = None,
            record_attention: Optional[str] = None, aux_layers: Sequence[int] = ()) -> ForwardResult:
    """Run the toy model under a pruning schedule.

    ``record_attention`` is ``None``, ``"text"`` (text-query rows only) or ``"all"``.
    ``aux_layers`` attaches the saliency pass as a pure side channel (scores are
    recorded in ``masks``, nothing is pruned) at layers without a filter.
    """
    sched.check_depth(model.num_layers)
    if sched.n_v != layout.n_vision:
        raise ValueError(f"schedule expects {sched.n_v} vision tokens, layout has {layout.n_vision}")
    return _run(model, layout, embeddings, sched.inject_layer, sched.exit_layer,
                dict(zip(sched.filter_layers, sched.stage_counts[1:])), cfg, pe, mode,
                train_soft_scale, variant, lam, vision_kv, record_attention, aux_layers)


def _run(model, layout, embeddings, inject, exit_, filters, cfg, pe, mode, train_soft_scale,
         variant, lam, vision_kv, record_attention, aux_layers=()):
    if mode not in (REMOVAL, MASKING):
        raise ValueError(f"mode must be {REMOVAL!r} or {MASKING!r}")
    L = model.num_layers
    T = len(layout)
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape != (T, model.shape.hidden):
        raise ValueError(f"embeddings must be {(T, model.shape.hidden)}, got {emb.shape}")
    if vision_kv is not None and vision_kv.layer != inject:
        raise ValueError("vision KV was produced for a different injection layer")
    mods = layout.modalities
    vision = layout.vision
    non_vision = layout.non_vision
    is_text = mods == TEXTUAL

    state = emb.copy()
    positions = layout.positions.copy()
    live_vision = np.array([], dtype=np.int64)
    live_at = np.zeros((L + 1, T), dtype=bool)
    live_at[0] = True
    hidden = [state.copy()]
    pos_hist = [positions.copy()]
    masks, survivors_at = {}, {}
    kv = KvCache()
    att_rec = [None] if record_attention else None
    att_q = [None] if record_attention else None

    for layer in range(1, L + 1):
        if layer == inject:
            live_vision = vision.copy()
        if layer == exit_:
            positions = apply_pe(positions, layout, pe, live_vision, [])
            live_vision = np.array([], dtype=np.int64)
        live = np.union1d(non_vision, live_vision)

        q_raw, k_raw, v = project_qkv(model, layer, state[live], positions[live])
        q, k = rotate(model, q_raw, positions[live]), rotate(model, k_raw, positions[live])
        if layer == inject and vision_kv is not None:
            rows = np.searchsorted(live, vision_kv.index)
            k[:, rows] = vision_kv.keys
            v[:, rows] = vision_kv.values
        kv.put(layer, live, k, v)

        if layer in aux_layers and layer not in filters and live_vision.size:
            masks[layer], _ = score_and_select(q, k, layout, live, cfg, live_vision.size,
                                               hidden=state[live], lam=lam, variant=variant)

        if layer in filters and live_vision.size:
            mask, keep = score_and_select(q, k, layout, live, cfg, filters[layer],
                                          hidden=state[live], lam=lam, variant=variant)
            masks[layer] = mask
            survivors_at[layer] = keep
            new_positions = apply_pe(positions, layout, pe, live_vision, keep)
            live_vision = keep
            new_live = np.union1d(non_vision, live_vision)
            kv.keep(layer, new_live)
            sel = np.searchsorted(live, new_live)
            if train_soft_scale:
                soft = dict(zip(vision[np.isin(vision, live)], mask.soft_values))
                scale = np.array([soft.get(int(i), 1.0) for i in new_live])
                state[new_live] = state[new_live] * scale[:, None]
                positions = new_positions
                q_raw, k_raw, v = project_qkv(model, layer, state[new_live], positions[new_live])
                q = rotate(model, q_raw, positions[new_live])
                k = rotate(model, k_raw, positions[new_live])
                kv.put(layer, new_live, k, v)
            elif not np.array_equal(new_positions, positions):
                positions = new_positions
                q = rotate(model, q_raw[:, sel], positions[new_live])
                k = rotate(model, k_raw[:, sel], positions[new_live])
                v = v[:, sel]
                kv.put(layer, new_live, k, v)
            else:
                q, k, v = q[:, sel], k[:, sel], v[:, sel]
            live = new_live

        live_at[layer, live] = True
        if mode == REMOVAL:
            bias = _bias(model, layer, live, live, mods)
            new, probs = _finish_block(model, layer, state[live], q, k, v, bias)
            state[live] = new
            q_tokens = live
        else:
            new, probs = _masked_block(model, layer, state, positions, live, q, k, v, mods)
            state[live] = new[live]
            q_tokens = np.arange(T)
        if record_attention:
            keep_rows = is_text[q_tokens] if record_attention == "text" else np.ones(q_tokens.size, bool)
            if mode == MASKING:
                keep_rows &= live_at[layer, q_tokens]
                probs = probs[:, :, live]
            att_rec.append(probs[:, keep_rows])
            att_q.append(q_tokens[keep_rows])
        hidden.append(state.copy())
        pos_hist.append(positions.copy())

    text_idx = np.flatnonzero(is_text)
    text_logits = logits_of(model, state[text_idx])
    return ForwardResult(
        hidden=np.array(hidden), layout=layout.with_liveness(live_at), positions=np.array(pos_hist),
        logits=text_logits[-1], text_logits=text_logits, masks=masks, survivors=survivors_at,
        kv=kv, attention=att_rec, attention_queries=att_q,
    )


def _masked_block(model, layer, state, positions, live, q_live, k_live, v_live, mods):
    """Full-sequence attention with dead keys masked; returns rows for every token."""
    T = state.shape[0]
    alive = np.zeros(T, dtype=bool)
    alive[live] = True
    q_raw, k_raw, v = project_qkv(model, layer, state, positions)
    q, k = rotate(model, q_raw, positions), rotate(model, k_raw, positions)
    # live rows use exactly the projections of the live pass (cached vision KV included)
    q[:, live], k[:, live], v[:, live] = q_live, k_live, v_live
    idx = np.arange(T)
    bias = _bias(model, layer, idx, idx, mods, key_alive=alive)
    # dead queries keep their own key so no row is fully masked; their output is discarded
    dead = ~alive
    bias[dead, dead] = 0.0
    return _finish_block(model, layer, state, q, k, v, bias)


# ------------------------------------------------------------- decoupled prefill


@dataclass(frozen=True)
class LaneEvent:
    lane: str
    name: str
    start: float
    end: float
    layer: Optional[int] = None


@dataclass(frozen=True)
class ExecutionLog:
    events: tuple
    inject_layer: int
    serial_time: float

    @property
    def parallel_layers(self) -> list:
        """Text layers with no dependency on the vision lane (run alongside it)."""
        return [e.layer for e in self.events if e.lane == "text" and e.layer is not None
                and e.layer < self.inject_layer]

    @property
    def makespan(self) -> float:
        return max(e.end for e in self.events)

    def lane(self, name: str) -> list:
        return [e for e in self.events if e.lane == name]


def build_execution_log(counts, shape: ModelShape, cost: CostModel, inject_layer: int,
                        filter_layers: Sequence[int]) -> ExecutionLog:
    events = [LaneEvent("vision", "encode+project+kv", 0.0, cost.vision_path)]
    t = 0.0
    for layer, n in enumerate(counts, start=1):
        if layer == inject_layer:
            t = max(t, cost.vision_path)
        if layer in filter_layers:
            events.append(LaneEvent("text", "select", t, t + cost.stage_overhead, layer))
            t += cost.stage_overhead
        dt = cost.layer_time(n, shape)
        events.append(LaneEvent("text", f"layer {layer}", t, t + dt, layer))
        t += dt
    serial = prefill_latency(counts, shape, cost, SERIAL, inject_layer, len(filter_layers))
    return ExecutionLog(tuple(events), inject_layer, serial)


def decoupled_prefill(model: ToyModel, layout: SequenceLayout, embeddings: np.ndarray,
                      sched: PruneSchedule, cfg: SaliencyConfig = SaliencyConfig(),
                      pe: PeMode = PeMode(), cost: Optional[CostModel] = None, **kwargs):
    """Forward pass fed by a separately produced vision KV, plus a two-lane timing log."""
    if sched.inject_layer <= 1:
        raise ValueError("decoupled prefill needs inject_layer > 1 (no text-only window otherwise)")
    vkv = vision_lane(model, layout, embeddings, sched.inject_layer)
    result = forward(model, layout, embeddings, sched, cfg, pe, vision_kv=vkv, **kwargs)
    cost = CostModel(text_tokens=int(layout.non_vision.size)) if cost is None else cost
    counts = layer_token_counts(sched, model.num_layers)
    log = build_execution_log(counts, model.shape, cost, sched.inject_layer, sched.filter_layers)
    return result, log, vkv


# ------------------------------------------------------------------ probes


def early_exit_probe(model: ToyModel, layout: SequenceLayout, embeddings: np.ndarray,
                     exit_layers: Sequence[int]) -> Dict[int, float]:
    """L2 distance of final-token logits from the full-vision run, per exit layer.

    Vision enters at layer 1; exit layer ``e`` removes it from layer ``e`` on
    (``e = 1`` means it never takes part, ``e = L + 1`` means it never leaves).
    """
    L = model.num_layers
    args = (SaliencyConfig(), PeMode(), REMOVAL, False, HARD, None, None, None)
    ref = _run(model, layout, embeddings, 1, L + 1, {}, *args).logits
    out = {}
    for e in exit_layers:
        if not 1 <= e <= L + 1:
            raise ValueError(f"exit layer {e} outside [1, {L + 1}]")
        inject = 1 if e > 1 else L + 1
        res = _run(model, layout, embeddings, inject, e if e > 1 else L + 2, {}, *args)
        out[int(e)] = float(np.linalg.norm(res.logits - ref))
    return out


def to_trace(result: ForwardResult, sample_id: str, pairing: Optional[str] = None,
             pair_id: Optional[str] = None) -> LayerTrace:
    """Package a forward pass as a LayerTrace (live rows only)."""
    layout = result.layout
    tokens = [TraceToken(t.index, t.modality, t.position_id) for t in layout.tokens]
    live = [np.flatnonzero(row) for row in result.live_at]
    hidden = [result.hidden[l][live[l]] for l in range(len(live))]
    return LayerTrace(sample_id, tokens, hidden, live, result.attention, result.attention_queries,
                      pairing, pair_id)


def plan_from_ilvas(curve, inject_layer: int, exit_layer: int, n_v: int, target_avg: float,
                    layers: int, max_filters: int = 4) -> PruneSchedule:
    """Filter layers from ILVAS peaks inside (inject, exit), then stage counts from the budget.

    At most ``max_filters`` peaks are kept, strongest first. Late peaks are
    dropped while the budget is out of reach of the remaining layers.
    """
    from hidrop.metrics import select_filter_layers
    from hidrop.schedule import ScheduleError, schedule_from_budget

    peaks = select_filter_layers(curve, (inject_layer + 1, exit_layer - 1))
    if not peaks:
        raise ValueError("ILVAS curve has no peak between injection and exit")
    strongest = sorted(peaks, key=lambda l: (-curve.value(l), l))[:max_filters]
    filters = sorted(strongest)
    while filters:
        try:
            return schedule_from_budget(inject_layer, exit_layer, filters, n_v, target_avg, layers)
        except ScheduleError:
            filters = filters[:-1]
    raise ValueError(f"no subset of ILVAS peaks {peaks} reaches an average of {target_avg}")
