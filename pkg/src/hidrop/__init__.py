"""Hierarchical vision-token dropping for multimodal decoders, on a deterministic toy substrate."""

from hidrop._accel import BACKEND
from hidrop.dtopk import SoftMask, keep_count_to_ratio, mask_gradients, normalized_rank, select_exact, soft_mask
from hidrop.schedule import (
    CostModel,
    DecayCurve,
    ModelShape,
    PruneSchedule,
    ScheduleError,
    average_tokens,
    decay_keep_ratio,
    flops,
    layer_token_counts,
    prefill_latency,
    reduction_percent,
    schedule_from_budget,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CostModel",
    "DecayCurve",
    "ModelShape",
    "PruneSchedule",
    "ScheduleError",
    "SoftMask",
    "average_tokens",
    "decay_keep_ratio",
    "flops",
    "keep_count_to_ratio",
    "layer_token_counts",
    "mask_gradients",
    "normalized_rank",
    "prefill_latency",
    "reduction_percent",
    "schedule_from_budget",
    "select_exact",
    "soft_mask",
]
