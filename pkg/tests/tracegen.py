"""Random and hand-built LayerTraces plus naive loop oracles for the metric tests."""

import math

import numpy as np

from hidrop.trace import SYSTEM, TEXTUAL, VISUAL, LayerTrace, TraceToken


def _softmax_rows(logits):
    out = np.exp(logits - logits.max(-1, keepdims=True))
    return out / out.sum(-1, keepdims=True)


def random_trace(rng, sample_id="s", L=None, n_vis=None, d=6, heads=3, pairing=None, pair_id=None,
                 n_text=None, query_subset=False):
    L = L or int(rng.integers(3, 7))
    n_sys = int(rng.integers(1, 3))
    n_vis = n_vis or int(rng.integers(4, 9))
    n_text = n_text or int(rng.integers(3, 6))
    mods = [SYSTEM] * n_sys + [VISUAL] * n_vis + [TEXTUAL] * n_text
    tokens = [TraceToken(i, m, i) for i, m in enumerate(mods)]
    vis = np.arange(n_sys, n_sys + n_vis)
    other = np.array([i for i in range(len(mods)) if mods[i] != VISUAL])
    inject = int(rng.integers(0, 2))
    alive = vis.copy()
    live, hidden, att, queries = [], [], [None], [None]
    for layer in range(L + 1):
        if layer > 1 and alive.size > 2 and rng.random() < 0.3:
            alive = np.sort(rng.choice(alive, size=alive.size - 1, replace=False))
        cur = np.union1d(other, alive if layer >= inject else [])
        live.append(cur.astype(np.int64))
        hidden.append(rng.standard_normal((cur.size, d)))
        if layer == 0:
            continue
        q = cur if not query_subset else cur[np.array([mods[i] == TEXTUAL for i in cur])]
        logits = rng.standard_normal((heads, q.size, cur.size)) * 2
        logits[:, cur[None, :] > q[:, None]] = -np.inf
        att.append(_softmax_rows(logits))
        queries.append(q.astype(np.int64))
    return LayerTrace(sample_id, tokens, hidden, live, att, queries, pairing, pair_id)


# ------------------------------------------------------------------ oracles


def _cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return max(-1.0, min(1.0, dot / (nu * nv)))


def _row(trace, layer, token):
    return list(trace.hidden[layer][list(trace.live[layer]).index(token)])


def oracle_s_intra(traces, modality):
    L = traces[0].num_layers
    out = []
    for layer in range(L):
        per_sample = []
        for tr in traces:
            members = [t.index for t in tr.tokens if t.modality == modality]
            both = [t for t in members if t in set(tr.live[layer]) and t in set(tr.live[layer + 1])]
            if both:
                per_sample.append(sum(_cos(_row(tr, layer, t), _row(tr, layer + 1, t)) for t in both) / len(both))
        out.append(sum(per_sample) / len(per_sample) if per_sample else float("nan"))
    return np.array(out)


def _pooled(trace, layer):
    idx = [t for t in trace.live[layer] if trace.modality_of(int(t)) == TEXTUAL]
    rows = [_row(trace, layer, t) for t in idx]
    return [sum(col) / len(rows) for col in zip(*rows)]


def oracle_s_cross(pairs):
    L = pairs[0][0].num_layers
    return np.array([sum(_cos(_pooled(m, l), _pooled(r, l)) for m, r in pairs) / len(pairs) for l in range(L + 1)])


def _received(trace, layer):
    att = trace.attention[layer]
    live = list(trace.live[layer])
    queries = list(trace.query_indices(layer))
    text_rows = [qi for qi, q in enumerate(queries) if trace.modality_of(int(q)) == TEXTUAL]
    out = {}
    for col, tok in enumerate(live):
        if trace.modality_of(int(tok)) != VISUAL:
            continue
        out[int(tok)] = [sum(att[h][qi][col] for qi in text_rows) / len(text_rows) for h in range(att.shape[0])]
    return out


def oracle_ilvas(traces, layer, n, k):
    scores = []
    for tr in traces:
        a, b = _received(tr, layer), _received(tr, layer + n)
        ranked = sorted(a, key=lambda t: (-sum(a[t]) / len(a[t]), t))[:k]
        scores.append(sum(_cos(a[t], b[t]) for t in ranked) / k)
    return sum(scores) / len(scores)


# ------------------------------------------------------------------ structured traces


def smooth_attention_trace(rng, L=24, n_vis=240, n_text=6, heads=6, noise=0.02, sample_id="smooth"):
    """Received attention = token strength x a head profile that drifts with depth, plus small noise."""
    n_sys = 1
    mods = [SYSTEM] * n_sys + [VISUAL] * n_vis + [TEXTUAL] * n_text
    T = len(mods)
    tokens = [TraceToken(i, m, i) for i, m in enumerate(mods)]
    strength = rng.uniform(0.2, 1.0, n_vis)
    live = [np.arange(T)] * (L + 1)
    hidden = [rng.standard_normal((T, 4)) for _ in range(L + 1)]
    att = [None]
    text = np.arange(n_sys + n_vis, T)
    for layer in range(1, L + 1):
        profile = 1.0 + 0.9 * np.sin(0.45 * layer * (1 + np.arange(heads) / heads) + np.arange(heads))
        a = np.zeros((heads, T, T))
        for h in range(heads):
            w = np.abs(strength * (profile[h] + noise * rng.standard_normal(n_vis)))
            w = 0.4 * w / strength.sum()
            a[h, np.arange(T), np.arange(T)] = 1.0
            a[h, text, n_sys:n_sys + n_vis] = w
            a[h, text, text] = 1.0 - w.sum()
        att.append(a)
    return LayerTrace(sample_id, tokens, hidden, live, att, None)
