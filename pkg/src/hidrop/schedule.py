"""Per-layer vision-token schedules, FLOPs accounting and a prefill latency model.

Layers are 1-based. A filter layer ``f`` already runs on the reduced token
set (selection happens between layer ``f - 1`` and layer ``f``). Vision
tokens exist on layers ``[inject_layer, exit_layer)``; ``exit_layer = L + 1``
means they never exit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ScheduleError(ValueError):
    """A schedule violates one of its structural invariants."""


@dataclass(frozen=True)
class ModelShape:
    layers: int
    hidden: int
    ffn: int
    heads: int

    def __post_init__(self):
        for name in ("layers", "hidden", "ffn", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelShape.{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass(frozen=True)
class PruneSchedule:
    inject_layer: int
    exit_layer: int
    filter_layers: tuple = ()
    stage_counts: tuple = ()
    n_v: int = 576

    def __post_init__(self):
        object.__setattr__(self, "filter_layers", tuple(int(f) for f in self.filter_layers))
        stages = tuple(int(s) for s in self.stage_counts) or (int(self.n_v),)
        object.__setattr__(self, "stage_counts", stages)
        self._check()

    def _check(self):
        F, S = self.filter_layers, self.stage_counts
        if self.n_v <= 0:
            raise ScheduleError("n_v must be positive")
        if self.inject_layer < 1:
            raise ScheduleError("inject_layer must be >= 1")
        if self.exit_layer <= self.inject_layer:
            raise ScheduleError("exit_layer must exceed inject_layer")
        if any(b <= a for a, b in zip(F, F[1:])):
            raise ScheduleError("filter_layers must be strictly increasing")
        if F and F[0] < self.inject_layer:
            raise ScheduleError("min(filter_layers) must be >= inject_layer")
        if F and F[-1] >= self.exit_layer:
            raise ScheduleError("max(filter_layers) must be < exit_layer")
        if len(S) != len(F) + 1:
            raise ScheduleError("stage_counts must have len(filter_layers) + 1 entries")
        if S[0] != self.n_v:
            raise ScheduleError("stage_counts[0] must equal n_v")
        if any(b >= a for a, b in zip(S, S[1:])):
            raise ScheduleError("stage_counts must be strictly decreasing")
        if S[-1] < 1:
            raise ScheduleError("stage_counts must stay positive")

    def check_depth(self, layers: int) -> None:
        if self.exit_layer > layers + 1:
            raise ScheduleError(f"exit_layer {self.exit_layer} exceeds L + 1 = {layers + 1}")

    @classmethod
    def vanilla(cls, n_v: int, layers: int) -> "PruneSchedule":
        return cls(1, layers + 1, (), (n_v,), n_v)

    def stage_at(self, layer: int) -> int:
        return sum(1 for f in self.filter_layers if f <= layer)

    def to_dict(self) -> dict:
        return {
            "inject_layer": self.inject_layer,
            "exit_layer": self.exit_layer,
            "filter_layers": list(self.filter_layers),
            "stage_counts": list(self.stage_counts),
            "n_v": self.n_v,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PruneSchedule":
        if not isinstance(data, dict):
            raise ScheduleError("schedule config must be a JSON object")
        for key in SCHEDULE_KEYS:
            if key not in data:
                raise ScheduleError(f"schedule config is missing key {key!r}")
        unknown = set(data) - set(SCHEDULE_KEYS)
        if unknown:
            raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(
            int(data["inject_layer"]),
            int(data["exit_layer"]),
            tuple(data["filter_layers"]),
            tuple(data["stage_counts"]),
            int(data["n_v"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PruneSchedule":
        if not text.strip():
            raise ScheduleError(f"schedule config is empty; missing key {SCHEDULE_KEYS[0]!r}")
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "PruneSchedule":
        return cls.loads(Path(path).read_text())


SCHEDULE_KEYS = ("inject_layer", "exit_layer", "filter_layers", "stage_counts", "n_v")


def layer_token_counts(sched: PruneSchedule, layers: int) -> np.ndarray:
    """Vision tokens alive at each layer ``1..L`` (index 0 is layer 1)."""
    sched.check_depth(layers)
    counts = np.zeros(layers, dtype=np.int64)
    for layer in range(sched.inject_layer, min(sched.exit_layer, layers + 1)):
        counts[layer - 1] = sched.stage_counts[sched.stage_at(layer)]
    return counts


def average_tokens(counts, layers: Optional[int] = None) -> float:
    counts = np.asarray(counts)
    layers = counts.size if layers is None else layers
    return float(counts.sum()) / layers


def reduction_percent(avg_tokens: float, n_v: int, decimals: int = 1) -> float:
    return round(100.0 * (1.0 - avg_tokens / n_v), decimals)


def layer_flops(n: int, shape: ModelShape) -> int:
    n, d, m = int(n), shape.hidden, shape.ffn
    return 4 * n * d * d + 2 * n * n * d + 3 * n * d * m


def flops(counts, shape: ModelShape) -> int:
    counts = [int(n) for n in counts]
    if len(counts) != shape.layers:
        raise ValueError(f"expected {shape.layers} per-layer counts, got {len(counts)}")
    return sum(layer_flops(n, shape) for n in counts)


# ---------------------------------------------------------------- decay curves

ED = "ED"
GED = "GED"


@dataclass(frozen=True)
class DecayCurve:
    kind: str = GED
    p: float = 1.0
    r_end: float = 1.0 / 576

    def __post_init__(self):
        if self.kind not in (ED, GED):
            raise ValueError(f"decay kind must be ED or GED, got {self.kind!r}")
        if not self.p > 0:
            raise ValueError(f"GED exponent p must be positive, got {self.p}")
        if not 0 < self.r_end <= 1:
            raise ValueError(f"r_end must lie in (0, 1], got {self.r_end}")


def decay_keep_ratio(curve: DecayCurve, t):
    """Keep ratio ``r_end ** (t ** p)`` at normalized position ``t`` in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    expo = t_arr if curve.kind == ED else t_arr ** curve.p
    r = curve.r_end ** expo
    return float(r) if r.ndim == 0 else r


def decay_token_counts(curve: DecayCurve, n_v: int, first: int, last: int) -> np.ndarray:
    """Per-layer counts over layers ``first..last`` (inclusive), rounded, >= 1."""
    if last <= first:
        raise ValueError("decay window needs last > first")
    t = (np.arange(first, last + 1) - first) / (last - first)
    return np.maximum(1, np.rint(n_v * decay_keep_ratio(curve, t))).astype(np.int64)


def evenly_spaced_schedule(stages: Sequence[int], layers: int, inject_layer: int = 1,
                           exit_layer: Optional[int] = None) -> PruneSchedule:
    """Drop to each stage count at evenly spaced layers inside the vision window."""
    exit_layer = layers + 1 if exit_layer is None else exit_layer
    width = exit_layer - inject_layer
    k = len(stages)
    filters = tuple(inject_layer + (i * width) // k for i in range(1, k))
    return PruneSchedule(inject_layer, exit_layer, filters, tuple(stages), stages[0])


# ----------------------------------------------------------- budget planning


def _spans(inject_layer: int, exit_layer: int, filters: Sequence[int]) -> list:
    bounds = [inject_layer, *filters, exit_layer]
    return [b - a for a, b in zip(bounds, bounds[1:])]


def budget_range(inject_layer: int, exit_layer: int, filters: Sequence[int], n_v: int,
                 layers: int) -> tuple:
    """(min, max) average tokens reachable by halving-constrained stage counts."""
    spans = _spans(inject_layer, exit_layer, filters)
    m = len(filters)
    base = n_v * spans[0]
    if m == 0:
        return base / layers, base / layers
    lo = [2 ** (m - k) for k in range(1, m + 1)]
    hi, prev = [], n_v
    for _ in range(m):
        prev //= 2
        hi.append(prev)
    if lo[0] > n_v // 2 or hi[-1] < 1:
        raise ScheduleError(f"{m} halving stages cannot fit under n_v={n_v}")
    total = lambda st: base + sum(s * w for s, w in zip(st, spans[1:]))
    return total(lo) / layers, total(hi) / layers


def schedule_from_budget(inject_layer: int, exit_layer: int, filters: Sequence[int], n_v: int,
                         target_avg: float, layers: int) -> PruneSchedule:
    """Concave stage counts whose per-layer average is within 1 token of ``target_avg``.

    Every stage is at most half of the previous one. Intermediate stages follow
    a geometric shrink factor; the final stage absorbs the residual. The scan
    (first stage descending, shrink factor ascending) is deterministic and the
    candidate with the smallest error wins, earliest in scan order on ties.
    """
    filters = tuple(int(f) for f in filters)
    PruneSchedule(inject_layer, exit_layer, filters, _placeholder_stages(n_v, len(filters)), n_v)
    lo_avg, hi_avg = budget_range(inject_layer, exit_layer, filters, n_v, layers)
    if not lo_avg - 1 <= target_avg <= hi_avg + 1:
        raise ScheduleError(
            f"budget {target_avg} infeasible: reachable average is [{lo_avg:.3f}, {hi_avg:.3f}]")
    spans = _spans(inject_layer, exit_layer, filters)
    m = len(filters)
    target_total = target_avg * layers
    base = n_v * spans[0]
    if m == 0:
        return PruneSchedule(inject_layer, exit_layer, (), (n_v,), n_v)

    def finish(prefix, partial):
        cap = prefix[-1] // 2 if prefix else n_v // 2
        last = int(np.clip(round((target_total - partial) / spans[-1]), 1, cap))
        return prefix + [last], partial + last * spans[-1]

    best = None
    for prefix, partial in _stage_prefixes(m, n_v, base, spans):
        stages, total = finish(list(prefix), partial)
        err = abs(total / layers - target_avg)
        if best is None or err < best[0] - 1e-12:
            best = (err, stages)
            if err < 1e-9:
                break
    err, stages = best
    if err > 1.0:
        raise ScheduleError(f"no concave schedule within 1 token of {target_avg} (best error {err:.3f})")
    return PruneSchedule(inject_layer, exit_layer, filters, (n_v, *stages), n_v)


def _stage_prefixes(m: int, n_v: int, base: int, spans: Sequence[int]):
    """Yield ``(stages[:m-1], partial_total)`` in deterministic scan order."""
    if m == 1:
        yield [], base
        return
    lower = [2 ** (m - k) for k in range(1, m + 1)]
    shrink = [2.0 * 1.02 ** i for i in range(int(math.log(n_v) / math.log(1.02)) + 1)]
    for s1 in range(n_v // 2, lower[0] - 1, -1):
        seen = set()
        for rho in shrink:
            st = [s1]
            for k in range(1, m - 1):
                st.append(int(min(max(math.floor(st[-1] / rho), lower[k]), st[-1] // 2)))
            key = tuple(st)
            if key in seen:
                continue
            seen.add(key)
            yield st, base + sum(s * w for s, w in zip(st, spans[1:]))


def _placeholder_stages(n_v: int, m: int) -> tuple:
    # structural validation only; any strictly decreasing positive chain works
    return tuple(max(1, n_v - i) for i in range(m + 1))


# -------------------------------------------------------------- latency model

SERIAL = "serial"
DECOUPLED = "decoupled"


@dataclass(frozen=True)
class CostModel:
    """Throughput constants for the prefill latency estimate.

    ``throughput`` is FLOP per time unit for the language model; ``vision_path``
    is the encoder + projector + vision KV projection time; ``stage_overhead``
    is paid once per filter stage; ``layer_overhead`` once per layer.
    """

    throughput: float = 1.0e12
    text_tokens: int = 64
    vision_path: float = 0.0
    stage_overhead: float = 0.0
    layer_overhead: float = 0.0

    def __post_init__(self):
        if not self.throughput > 0:
            raise ValueError("throughput must be positive")
        for name in ("text_tokens", "vision_path", "stage_overhead", "layer_overhead"):
            if getattr(self, name) < 0:
                raise ValueError(f"CostModel.{name} must be nonnegative")

    def layer_time(self, n_vision: int, shape: ModelShape) -> float:
        return layer_flops(self.text_tokens + int(n_vision), shape) / self.throughput + self.layer_overhead


def layer_times(counts, shape: ModelShape, cost: CostModel) -> list:
    return [cost.layer_time(n, shape) for n in counts]


def prefill_latency(counts, shape: ModelShape, cost: CostModel, mode: str = SERIAL,
                    inject_layer: int = 1, n_stages: int = 0) -> float:
    """Estimated prefill time.

    serial: vision path, then every layer. decoupled: the vision path runs
    alongside the text-only layers ``1..inject_layer-1``.
    """
    times = layer_times(counts, shape, cost)
    if len(times) != shape.layers:
        raise ValueError(f"expected {shape.layers} per-layer counts, got {len(times)}")
    shallow = math.fsum(times[: inject_layer - 1])
    deep = math.fsum(times[inject_layer - 1 :])
    stages = n_stages * cost.stage_overhead
    if mode == SERIAL:
        return cost.vision_path + shallow + deep + stages
    if mode == DECOUPLED:
        return max(cost.vision_path, shallow) + deep + stages
    raise ValueError(f"unknown latency mode {mode!r}")


def schedule_latency(sched: PruneSchedule, shape: ModelShape, cost: CostModel,
                     mode: str = SERIAL) -> float:
    counts = layer_token_counts(sched, shape.layers)
    return prefill_latency(counts, shape, cost, mode, sched.inject_layer, len(sched.filter_layers))
