import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hidrop.importance import (
    ALL, ALL_L2, CAUSAL_FULL, LAST_1R, LAST_NR, LAST_NR_L2, STRATEGIES, STRATEGY_LABELS, SaliencyConfig,
    parse_strategy, query_tokens, saliency, score_and_select,
)
from hidrop.layout import build_layout


def _naive_scores(q, k, layout, strategy, hidden):
    mods = list(layout.modalities)
    vis = [i for i, m in enumerate(mods) if m == "visual"]
    text = [i for i, m in enumerate(mods) if m == "textual"]
    segs = list(layout.segments)
    if strategy == LAST_1R:
        queries = [text[-1]]
    elif strategy in (ALL, ALL_L2):
        queries = text
    else:
        queries = [t for j, t in enumerate(text) if j == len(text) - 1 or segs[text[j + 1]] != segs[t]]
    if strategy in (LAST_NR_L2, ALL_L2):
        norms = [math.sqrt(sum(x * x for x in hidden[t])) for t in queries]
        weights = [w / sum(norms) for w in norms]
    else:
        weights = [1 / len(queries)] * len(queries)
    H, _, hd = q.shape
    out = []
    for v in vis:
        total = 0.0
        for h in range(H):
            for w, t in zip(weights, queries):
                logits = [sum(q[h, t, c] * k[h, u, c] for c in range(hd)) / math.sqrt(hd) for u in vis]
                m = max(logits)
                ex = [math.exp(x - m) for x in logits]
                total += w * ex[vis.index(v)] / sum(ex) / H
        out.append(total)
    return np.array(vis), np.array(out)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_saliency_matches_naive_oracle(strategy, rng):
    layout = build_layout(2, 7, [3, 2, 4])
    n = len(layout)
    q, k = rng.standard_normal((2, 3, n, 4))
    hidden = rng.standard_normal((n, 5))
    vis, got = saliency(q, k, layout, np.arange(n), SaliencyConfig(strategy), hidden)
    want_vis, want = _naive_scores(q, k, layout, strategy, hidden)
    np.testing.assert_array_equal(vis, want_vis)
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_single_and_identical_keys(rng):
    layout = build_layout(1, 1, [3])
    q, k = rng.standard_normal((2, 2, 5, 4))
    _, s = saliency(q, k, layout, np.arange(5), SaliencyConfig())
    np.testing.assert_allclose(s, [1.0])
    layout = build_layout(1, 2, [3])
    k = rng.standard_normal((2, 6, 4))
    k[:, 2] = k[:, 1]
    q = rng.standard_normal((2, 6, 4))
    _, s = saliency(q, k, layout, np.arange(6), SaliencyConfig(ALL))
    np.testing.assert_allclose(s, [0.5, 0.5], atol=1e-15)


def test_top_k_selection_matches_argsort(rng):
    layout = build_layout(1, 12, [4, 3])
    n = len(layout)
    q, k = rng.standard_normal((2, 4, n, 8))
    vis, scores = saliency(q, k, layout, np.arange(n), SaliencyConfig())
    _, kept = score_and_select(q, k, layout, np.arange(n), SaliencyConfig(), 2)
    want = np.sort(vis[np.argsort(-scores, kind="stable")[:2]])
    np.testing.assert_array_equal(kept, want)
    _, all_kept = score_and_select(q, k, layout, np.arange(n), SaliencyConfig(), 12)
    np.testing.assert_array_equal(all_kept, vis)


def test_ties_keep_lowest_indices():
    layout = build_layout(0, 6, [2])
    q = np.zeros((1, 8, 2))
    k = np.zeros((1, 8, 2))
    _, kept = score_and_select(q, k, layout, np.arange(8), SaliencyConfig(), 3)
    np.testing.assert_array_equal(kept, [0, 1, 2])


@given(st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_scores_are_a_distribution_and_key_permutation_equivariant(scale, seed):
    rng = np.random.default_rng(seed)
    layout = build_layout(1, 6, [3])
    n = len(layout)
    q, k = rng.standard_normal((2, 2, n, 4)) * scale
    hidden = rng.standard_normal((n, 3))
    _, s = saliency(q, k, layout, np.arange(n), SaliencyConfig(LAST_NR_L2), hidden)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(s >= 0)
    _, s2 = saliency(q, k, layout, np.arange(n), SaliencyConfig(LAST_NR_L2), hidden * scale)
    np.testing.assert_allclose(s, s2, atol=1e-12)


def test_pruned_live_set(rng):
    layout = build_layout(1, 8, [3])
    live = np.array([0, 2, 3, 7, 9, 10, 11])
    q, k = rng.standard_normal((2, 2, live.size, 4))
    vis, s = saliency(q, k, layout, live, SaliencyConfig())
    np.testing.assert_array_equal(vis, [2, 3, 7])
    assert s.sum() == pytest.approx(1.0)


def test_query_tokens_per_strategy():
    layout = build_layout(1, 2, [2, 3])
    live = np.arange(len(layout))
    assert list(query_tokens(layout, live, SaliencyConfig(LAST_1R))) == [7]
    assert list(query_tokens(layout, live, SaliencyConfig(LAST_NR))) == [4, 7]
    assert list(query_tokens(layout, live, SaliencyConfig(ALL))) == [3, 4, 5, 6, 7]
    assert list(query_tokens(layout, live, SaliencyConfig(LAST_NR, rounds=(4,)))) == [4]
    with pytest.raises(ValueError, match="live text"):
        query_tokens(layout, live, SaliencyConfig(LAST_NR, rounds=(1,)))


def test_causal_full_domain_differs(rng):
    layout = build_layout(2, 4, [3])
    n = len(layout)
    q, k = rng.standard_normal((2, 2, n, 4))
    _, s = saliency(q, k, layout, np.arange(n), SaliencyConfig(softmax_domain=CAUSAL_FULL))
    assert s.sum() < 1.0


def test_parse_strategy_and_errors(rng):
    for key, label in STRATEGY_LABELS.items():
        assert parse_strategy(label) == key
        assert parse_strategy(key) == key
    with pytest.raises(ValueError, match="unknown"):
        parse_strategy("middle token")
    with pytest.raises(ValueError):
        SaliencyConfig(ALL, rounds=(1,))
    with pytest.raises(ValueError):
        SaliencyConfig(head_agg="median")
    layout = build_layout(1, 3, [2])
    q, k = rng.standard_normal((2, 1, 6, 2))
    with pytest.raises(ValueError, match="hidden"):
        saliency(q, k, layout, np.arange(6), SaliencyConfig(ALL_L2))
    with pytest.raises(ValueError, match="cannot keep"):
        score_and_select(q, k, layout, np.arange(6), SaliencyConfig(), 4)
    with pytest.raises(ValueError, match="no live vision"):
        saliency(q[:, [0, 4, 5]], k[:, [0, 4, 5]], layout, np.array([0, 4, 5]), SaliencyConfig())
