"""Acceptance suite: each test is one numbered criterion, checked against an independent oracle."""

import math
import time

import numpy as np
import pytest

from hidrop.dtopk import SOFT, keep_count_to_ratio, mask_gradients, soft_mask
from hidrop.layout import COMPACTED, PERSISTENT, PeMode, apply_pe, build_layout
from hidrop.metrics import ilvas, ilvas_curve, s_cross, s_intra
from hidrop.pipeline import MASKING, REMOVAL, ToyModel, decoupled_prefill, forward, make_embeddings, \
    plan_from_ilvas, to_trace
from hidrop.schedule import (
    DECOUPLED, ED, GED, SERIAL, CostModel, DecayCurve, ModelShape, PruneSchedule, decay_keep_ratio, flops,
    layer_token_counts, prefill_latency, reduction_percent, schedule_from_budget,
)
from hidrop.trace import SYSTEM, TEXTUAL, VISUAL
from hidrop.verify import random_instance
from tracegen import oracle_ilvas, oracle_s_cross, oracle_s_intra, random_trace


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.2f} s, limit {self.limit} s"


def _report(n, ok=True):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}")


def _oracle_flops(n, d, m, L):
    return L * (4 * n * d * d + 2 * n * n * d + 3 * n * d * m)


@pytest.mark.criterion(1)
def test_c01_flops_goldens():
    with Timer(1.0):
        for (L, d, m, H), golden in [((32, 4096, 11008, 32), 3.82e12), ((40, 5120, 13824, 40), 7.44e12),
                                     ((32, 2560, 6912, 32), 1.52e12)]:
            shape = ModelShape(L, d, m, H)
            got = flops(layer_token_counts(PruneSchedule.vanilla(576, L), L), shape)
            assert got == _oracle_flops(576, d, m, L)
            assert abs(got - golden) / golden < 0.01
    _report(1)


@pytest.mark.criterion(2)
def test_c02_budget_reductions():
    with Timer(1.0):
        for avg, want in [(80, 86.1), (64, 88.9), (48, 91.7)]:
            assert reduction_percent(avg, 576) == want
            assert round(100 * (1 - avg / 576), 1) == want
        sched = schedule_from_budget(9, 25, (10, 14, 16, 18), 576, 64, 32)
        assert layer_token_counts(sched, 32).sum() / 32 == 64
    _report(2)


@pytest.mark.criterion(3)
def test_c03_prune_mask_equivalence():
    with Timer(30.0):
        worst = 0.0
        for seed in range(20):
            model, layout, emb, sched = random_instance(seed)
            assert model.shape.hidden in (32, 64) and model.num_layers in (8, 12) and layout.n_vision in (8, 16)
            a = forward(model, layout, emb, sched, mode=REMOVAL)
            b = forward(model, layout, emb, sched, mode=MASKING)
            assert np.array_equal(a.live_at, b.live_at)
            for l in range(model.num_layers + 1):
                live = a.live_at[l]
                worst = max(worst, float(np.max(np.abs(a.hidden[l][live] - b.hidden[l][live]))))
        assert worst < 1e-6
    _report(3)


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


@pytest.mark.criterion(4)
def test_c04_dtopk_gradients():
    rng = np.random.default_rng(404)
    h = 1e-6
    with Timer(10.0):
        for _ in range(100):
            n = int(rng.integers(2, 65))
            c = rng.standard_normal(n)
            a = float(rng.uniform(0.05, 0.95))
            # oracle forward: hard rank counts ties with >=, then sigmoid(n (rank - a))
            rank = np.array([np.sum(c[i] >= c) for i in range(n)]) / n
            np.testing.assert_allclose(soft_mask(c, a).soft_values, _sig(n * (rank - a)), atol=1e-14)
            d_a, _ = mask_gradients(soft_mask(c, a))
            fd = (_sig(n * (rank - a - h)) - _sig(n * (rank - a + h))) / (2 * h)
            assert np.linalg.norm(d_a - fd) / np.linalg.norm(fd) < 1e-4
        for _ in range(20):
            c = rng.permutation(8) / 8 + rng.uniform(0, 0.05, 8)
            a = float(rng.uniform(0.2, 0.8))
            _, jac = mask_gradients(soft_mask(c, a, variant=SOFT))
            fd = np.empty((8, 8))
            for j in range(8):
                e = np.zeros(8)
                e[j] = h
                fd[:, j] = (soft_mask(c + e, a, variant=SOFT).soft_values
                            - soft_mask(c - e, a, variant=SOFT).soft_values) / (2 * h)
            assert np.linalg.norm(jac - fd) / np.linalg.norm(fd) < 1e-3
    _report(4)


@pytest.mark.criterion(5)
def test_c05_count_exactness():
    rng = np.random.default_rng(505)
    with Timer(5.0):
        for n in range(1, 65):
            c = rng.standard_normal(n)
            assert np.unique(c).size == n
            for k in range(1, n + 1):
                keep = soft_mask(c, keep_count_to_ratio(k, n)).hard_keep
                assert keep.sum() == k
                assert set(np.flatnonzero(keep)) == set(np.argsort(-c)[:k])
    _report(5)


@pytest.mark.criterion(6)
def test_c06_large_lambda():
    rng = np.random.default_rng(606)
    for i in range(100):
        n = int(rng.integers(2, 300))
        c = rng.standard_normal(n)
        a = keep_count_to_ratio(int(rng.integers(1, n + 1)), n)
        m = soft_mask(c, a, lam=1e4 * n)
        assert np.max(np.abs(m.soft_values - m.hard_keep)) < 1e-3
    c = rng.standard_normal(576)
    m = soft_mask(c, keep_count_to_ratio(64, 576))
    assert m.lam == 576.0 and m.hard_keep.sum() == 64
    assert np.all(m.soft_values[m.hard_keep] > 0.5) and np.all(m.soft_values[~m.hard_keep] < 0.5)
    _report(6)


def _offsets_preserved(variant, keep):
    layout = build_layout(3, 10, [4, 2], PeMode(variant))
    before = layout.positions
    after = apply_pe(before, layout, PeMode(variant), layout.vision, keep)
    live = np.concatenate([layout.non_vision, np.asarray(keep, dtype=np.int64)])
    return all(after[i] - after[j] == before[i] - before[j] for i in live for j in live)


@pytest.mark.criterion(7)
def test_c07_pe_geometry():
    rng = np.random.default_rng(707)
    vision = np.arange(3, 13)
    with Timer(5.0):
        for _ in range(50):
            k = int(rng.integers(0, 10))
            keep = np.sort(rng.choice(vision, size=k, replace=False))
            assert _offsets_preserved(PERSISTENT, keep)
            dropped = np.setdiff1d(vision, keep)
            if dropped.size and keep.size and dropped.min() < keep.max():
                assert not _offsets_preserved(COMPACTED, keep)
    _report(7)


@pytest.mark.criterion(7)
@pytest.mark.xfail(strict=True, reason="Compacted PE reindexes survivors and shifts relative offsets")
def test_c07_compacted_geometry_expected_failure():
    assert _offsets_preserved(COMPACTED, [3, 5, 8])


@pytest.mark.criterion(8)
def test_c08_metric_oracles():
    rng = np.random.default_rng(808)
    checked = 0
    with Timer(10.0):
        for i in range(20):
            L = int(rng.integers(3, 6))
            tr = random_trace(rng, f"s{i}", L=L, n_vis=6, n_text=4, query_subset=bool(i % 2))
            ref = random_trace(rng, f"r{i}", L=L, n_vis=6, n_text=4, pairing="reference")
            tr.pairing = "mismatched"
            for m in (SYSTEM, VISUAL, TEXTUAL):
                got = s_intra([tr], m)
                np.testing.assert_allclose(got, oracle_s_intra([tr], m), atol=1e-12, equal_nan=True)
                got = got[~np.isnan(got)]
                assert np.all((got >= -1) & (got <= 1))
            got = s_cross([(tr, ref)])
            np.testing.assert_allclose(got, oracle_s_cross([(tr, ref)]), atol=1e-12)
            assert np.all((got >= -1) & (got <= 1))
            for layer in range(1, L):
                try:
                    got = ilvas([tr], layer, 1, 2)
                except ValueError:
                    continue  # too few surviving vision tokens for K
                assert abs(got - oracle_ilvas([tr], layer, 1, 2)) < 1e-12 and -1 <= got <= 1
                checked += 1
    assert checked >= 20
    _report(8)


@pytest.mark.criterion(9)
def test_c09_ged_family():
    r_end = 1 / 576
    t = np.linspace(0, 1, 101)
    with Timer(1.0):
        for p in (0.25, 0.5, 1.0, 2.0):
            r = decay_keep_ratio(DecayCurve(GED, p, r_end), t)
            assert r[0] == 1.0 and abs(r[-1] - r_end) < 1e-15
            np.testing.assert_allclose(r, [r_end ** (x ** p) for x in t], rtol=1e-12)
        ed = decay_keep_ratio(DecayCurve(ED, 1.0, r_end), t)
        np.testing.assert_allclose(ed, np.exp(t * math.log(r_end)), rtol=1e-12)
        assert np.max(np.abs(decay_keep_ratio(DecayCurve(GED, 1.0, r_end), t) - ed)) < 1e-12
        half = decay_keep_ratio(DecayCurve(GED, 0.5, r_end), t)
        assert np.all(half[1:-1] < ed[1:-1]) and half[1:-1].size == 99
    _report(9)


@pytest.mark.criterion(10)
def test_c10_decoupled_prefill():
    done, seed = 0, 0
    while done < 10:
        model, layout, emb, sched = random_instance(seed)
        seed += 1
        if sched.inject_layer == 1:
            continue
        res, _, _ = decoupled_prefill(model, layout, emb, sched)
        ref = forward(model, layout, emb, sched)
        assert np.array_equal(res.hidden, ref.hidden) and np.array_equal(res.logits, ref.logits)
        done += 1
    rng = np.random.default_rng(1010)
    shape = ModelShape(32, 4096, 11008, 32)
    sched = schedule_from_budget(9, 25, (10, 14, 16, 18), 576, 64, 32)
    counts = layer_token_counts(sched, 32)
    for _ in range(100):
        cost = CostModel(float(10 ** rng.uniform(11, 14)), int(rng.integers(1, 512)), float(rng.uniform(0, 0.05)),
                         float(rng.uniform(0, 1e-3)), float(rng.uniform(0, 1e-4)))
        ser = prefill_latency(counts, shape, cost, SERIAL, 9, 4)
        dec = prefill_latency(counts, shape, cost, DECOUPLED, 9, 4)
        assert dec <= ser
    _report(10)


@pytest.mark.criterion(11)
def test_c11_end_to_end():
    with Timer(60.0):
        shape = ModelShape(layers=32, hidden=32, ffn=64, heads=4)
        model = ToyModel.build(shape, seed=0)
        layout = build_layout(4, 576, [12, 8])
        emb = make_embeddings(layout, 32, 0)
        probe = forward(model, layout, emb, PruneSchedule.vanilla(576, 32), record_attention="text")
        curve = ilvas_curve([to_trace(probe, "sample-0")], range(1, 32), 1, 20)
        sched = plan_from_ilvas(curve, 9, 25, 576, 64, 32)
        res = forward(model, layout, emb, sched)
        vis = layout.modalities == VISUAL
        avg = res.live_at[1:, vis].sum() / 32
        assert abs(avg - 64) <= 1
    _report(11)
