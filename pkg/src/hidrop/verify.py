"""Self-checks behind ``hidrop verify``: invariants, goldens and a negative control."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from hidrop import presets
from hidrop.dtopk import SOFT, keep_count_to_ratio, mask_gradients, soft_mask
from hidrop.layout import COMPACTED, PERSISTENT, PeMode, apply_pe, build_layout
from hidrop.schedule import (
    DECOUPLED, ED, GED, SERIAL, CostModel, DecayCurve, ModelShape, PruneSchedule, decay_keep_ratio, flops, layer_token_counts, prefill_latency, reduction_percent,
)

PASS = "pass"
FAIL = "fail"
XFAIL = "expected-failure"

FLOPS_GOLDENS = {"llava-7b": 3.82e12, "llava-13b": 7.44e12, "llava-2.7b": 1.52e12}
REDUCTION_GOLDENS = {80: 86.1, 64: 88.9, 48: 91.7}


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str
    max_error: float
    seconds: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (PASS, XFAIL)


class CheckFailed(AssertionError):
    def __init__(self, message: str, error: float = float("nan")):
        super().__init__(message)
        self.error = error


def _expect(cond: bool, message: str, error: float = float("nan")) -> None:
    if not cond:
        raise CheckFailed(message, error)


def check_flops(goldens: Dict[str, float]) -> float:
    worst = 0.0
    for name, want in goldens.items():
        shape = presets.shape(name)
        got = flops(layer_token_counts(PruneSchedule.vanilla(576, shape.layers), shape.layers), shape)
        rel = abs(got - want) / want
        worst = max(worst, rel)
        _expect(rel < 0.01, f"vanilla FLOPs of {name}: {got:.4e} vs golden {want:.4e}", rel)
    return worst


def check_reductions(goldens: Dict[int, float]) -> float:
    for avg, want in goldens.items():
        got = reduction_percent(avg, 576)
        _expect(got == want, f"reduction for average {avg}: {got} vs golden {want}", abs(got - want))
    return 0.0


def check_prune_mask(seeds) -> float:
    from hidrop.pipeline import MASKING, REMOVAL, forward

    worst = 0.0
    for seed in seeds:
        model, layout, emb, sched = random_instance(seed)
        a = forward(model, layout, emb, sched, mode=REMOVAL)
        b = forward(model, layout, emb, sched, mode=MASKING)
        _expect(np.array_equal(a.live_at, b.live_at), f"seed {seed}: live sets differ between modes")
        for layer in range(model.num_layers + 1):
            live = a.live_at[layer]
            diff = float(np.max(np.abs(a.hidden[layer][live] - b.hidden[layer][live])))
            worst = max(worst, diff)
            _expect(diff < 1e-6, f"seed {seed} layer {layer}: removal vs masking differ by {diff:.3e}", diff)
    return worst


def random_instance(seed: int, pe: PeMode = PeMode()):
    """Random small (model, layout, embeddings, schedule) for invariant checks."""
    from hidrop.pipeline import ToyModel, make_embeddings

    rng = np.random.default_rng(seed)
    d = int(rng.choice([32, 64]))
    L = int(rng.choice([8, 12]))
    n_v = int(rng.choice([8, 16]))
    shape = ModelShape(layers=L, hidden=d, ffn=2 * d, heads=4)
    model = ToyModel.build(shape, seed=seed)
    segs = [int(x) for x in rng.integers(2, 6, size=int(rng.integers(1, 4)))]
    layout = build_layout(int(rng.integers(0, 4)), n_v, segs, pe)
    emb = make_embeddings(layout, d, seed)
    inject = int(rng.integers(1, L // 2 + 1))
    exit_ = int(rng.integers(inject + 2, L + 2))
    room = list(range(inject + 1, exit_))
    m = int(rng.integers(0, min(3, len(room)) + 1))
    filters = tuple(sorted(int(f) for f in rng.choice(room, size=m, replace=False))) if m else ()
    stages = sorted((int(x) for x in rng.choice(np.arange(1, n_v), size=m, replace=False)), reverse=True)
    return model, layout, emb, PruneSchedule(inject, exit_, filters, (n_v, *stages), n_v)


def check_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        c = rng.standard_normal(n)
        a = float(rng.uniform(0.05, 0.95))
        m = soft_mask(c, a)
        d_a, _ = mask_gradients(m)
        fd = (soft_mask(c, a + h).soft_values - soft_mask(c, a - h).soft_values) / (2 * h)
        rel = np.linalg.norm(d_a - fd) / max(np.linalg.norm(fd), 1e-300)
        worst = max(worst, rel)
        _expect(rel < 1e-4, f"d mask / d a relative error {rel:.3e}", rel)
    for _ in range(20):
        c = rng.permutation(8) / 8 + rng.uniform(0, 0.05, 8)
        a = float(rng.uniform(0.2, 0.8))
        m = soft_mask(c, a, variant=SOFT)
        _, jac = mask_gradients(m)
        fd = np.empty((8, 8))
        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            fd[:, j] = (soft_mask(c + e, a, variant=SOFT).soft_values
                        - soft_mask(c - e, a, variant=SOFT).soft_values) / (2 * h)
        rel = np.linalg.norm(jac - fd) / max(np.linalg.norm(fd), 1e-300)
        worst = max(worst, rel)
        _expect(rel < 1e-3, f"soft-rank Jacobian relative error {rel:.3e}", rel)
    return worst


def check_count(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    for n in range(1, 65):
        c = rng.permutation(n).astype(np.float64)
        for k in range(1, n + 1):
            got = int(soft_mask(c, keep_count_to_ratio(k, n)).hard_keep.sum())
            _expect(got == k, f"n={n} k={k}: hard mask keeps {got}", abs(got - k))
    return 0.0


def check_large_lambda(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(100):
        n = 576 if i == 0 else int(rng.integers(2, 200))
        c = rng.permutation(n).astype(np.float64)
        a = keep_count_to_ratio(int(rng.integers(1, n + 1)), n)
        m = soft_mask(c, a, lam=1e4 * n)
        gap = float(np.max(np.abs(m.soft_values - m.hard_keep)))
        worst = max(worst, gap)
        _expect(gap < 1e-3, f"n={n}: large-lambda mask differs from hard by {gap:.3e}", gap)
    default = soft_mask(rng.permutation(576).astype(np.float64), keep_count_to_ratio(64, 576))
    _expect(default.lam == 576 and int(default.hard_keep.sum()) == 64, "default lambda at N_v=576")
    return worst


def pe_geometry_holds(variant: str, seed: int = 0) -> bool:
    """True when every pairwise position difference among survivors is unchanged by a prune."""
    layout = build_layout(2, 12, [4, 3], PeMode(variant))
    rng = np.random.default_rng(seed)
    vision = layout.vision
    keep = np.sort(rng.choice(vision[:-1], size=5, replace=False))  # drops a non-suffix token
    before = layout.positions
    after = apply_pe(before, layout, PeMode(variant), vision, keep)
    live = np.concatenate([layout.non_vision, keep])
    return bool(np.array_equal(np.subtract.outer(before[live], before[live]),
                               np.subtract.outer(after[live], after[live])))


def check_pe_persistent() -> float:
    for seed in range(10):
        _expect(pe_geometry_holds(PERSISTENT, seed), f"Persistent PE changed a position offset (seed {seed})")
    return 0.0


def check_pe_compacted() -> float:
    # documents the mechanism: compaction rewrites relative offsets
    _expect(pe_geometry_holds(COMPACTED), "Compacted PE shifts relative offsets")
    return 0.0


def check_ged() -> float:
    worst = 0.0
    t = np.linspace(0, 1, 101)
    for p in (0.25, 0.5, 1.0, 2.0, 3.0):
        r = decay_keep_ratio(DecayCurve(GED, p), t)
        _expect(r[0] == 1.0 and abs(r[-1] - 1 / 576) < 1e-15, f"p={p}: endpoints not anchored")
    ed = decay_keep_ratio(DecayCurve(ED), t)
    worst = float(np.max(np.abs(decay_keep_ratio(DecayCurve(GED, 1.0), t) - ed)))
    _expect(worst < 1e-12, "GED(p=1) differs from ED", worst)
    half = decay_keep_ratio(DecayCurve(GED, 0.5), t)
    _expect(bool(np.all(half[1:-1] < ed[1:-1])), "GED(p=0.5) is not below ED at every interior point")
    return worst


def check_decoupled(seeds) -> float:
    from hidrop.pipeline import decoupled_prefill, forward

    done = 0
    for seed in seeds:
        model, layout, emb, sched = random_instance(seed)
        if sched.inject_layer == 1:
            continue
        res, _, _ = decoupled_prefill(model, layout, emb, sched)
        ref = forward(model, layout, emb, sched)
        _expect(np.array_equal(res.hidden, ref.hidden) and np.array_equal(res.logits, ref.logits),
                f"seed {seed}: decoupled prefill is not bit-identical to forward")
        done += 1
    _expect(done > 0, "no instance with inject_layer > 1")
    rng = np.random.default_rng(0)
    shape = presets.shape("llava-7b")
    sched = presets.schedule("hidrop")
    counts = layer_token_counts(sched, shape.layers)
    for _ in range(100):
        cost = CostModel(float(10 ** rng.uniform(11, 14)), int(rng.integers(1, 512)),
                         float(rng.uniform(0, 0.05)), float(rng.uniform(0, 1e-3)), float(rng.uniform(0, 1e-4)))
        ser = prefill_latency(counts, shape, cost, SERIAL, sched.inject_layer, len(sched.filter_layers))
        dec = prefill_latency(counts, shape, cost, DECOUPLED, sched.inject_layer, len(sched.filter_layers))
        _expect(dec <= ser, f"decoupled latency {dec} exceeds serial {ser}")
    return 0.0


def check_end_to_end(seed: int = 0, target: float = 64.0) -> float:
    err = end_to_end(seed, target)["error"]
    _expect(err <= 1.0, f"end-to-end average misses target by {err:.3f}", err)
    return err


def end_to_end(seed: int = 0, target: float = 64.0, layers: int = 32, hidden: int = 32) -> dict:
    """Trace -> ILVAS -> filter layers -> budget schedule -> pruned forward."""
    from hidrop.metrics import ilvas_curve
    from hidrop.pipeline import ToyModel, forward, make_embeddings, plan_from_ilvas, to_trace

    shape = ModelShape(layers=layers, hidden=hidden, ffn=2 * hidden, heads=4)
    model = ToyModel.build(shape, seed=seed)
    layout = build_layout(4, 576, [12, 8])
    emb = make_embeddings(layout, hidden, seed)
    probe = forward(model, layout, emb, PruneSchedule.vanilla(576, layers), record_attention="text")
    trace = to_trace(probe, f"sample-{seed}")
    curve = ilvas_curve([trace], range(1, layers), 1, 20)
    sched = plan_from_ilvas(curve, 9, 25, 576, target, layers)
    run = forward(model, layout, emb, sched)
    avg = float(np.mean(run.vision_counts()))
    return {"schedule": sched, "curve": curve, "average": avg, "error": abs(avg - target)}


def default_checks(seeds=range(20), golden_scale: float = 1.0) -> List[tuple]:
    """(name, callable, expect_failure) triples. ``golden_scale != 1`` corrupts a golden."""
    goldens = dict(FLOPS_GOLDENS)
    goldens["llava-7b"] *= golden_scale
    seeds = list(seeds)
    return [
        ("flops-goldens", lambda: check_flops(goldens), False),
        ("budget-reductions", lambda: check_reductions(REDUCTION_GOLDENS), False),
        ("prune-mask-equivalence", lambda: check_prune_mask(seeds), False),
        ("dtopk-gradients", check_gradients, False),
        ("dtopk-count", check_count, False),
        ("large-lambda", check_large_lambda, False),
        ("pe-geometry-persistent", check_pe_persistent, False),
        ("pe-geometry-compacted", check_pe_compacted, True),
        ("ged-family", check_ged, False),
        ("decoupled-prefill", lambda: check_decoupled(seeds[:10]), False),
        ("end-to-end", check_end_to_end, False),
    ]


def run_checks(checks, only: Optional[set] = None) -> List[CheckResult]:
    results = []
    for name, fn, expect_fail in checks:
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            err = fn()
            status, detail = (FAIL, "expected failure did not occur") if expect_fail else (PASS, "")
        except CheckFailed as exc:
            err = exc.error
            status, detail = (XFAIL, str(exc)) if expect_fail else (FAIL, str(exc))
        results.append(CheckResult(name, status, float(err), time.perf_counter() - t0, detail))
    return results
