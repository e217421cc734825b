"""Vision-token saliency from a small auxiliary attention pass, and DTop-K selection.

The auxiliary pass scores vision keys with a handful of text queries and never
writes into the main forward state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hidrop import kernels
from hidrop.dtopk import HARD, SoftMask, keep_count_to_ratio, select_exact, soft_mask
from hidrop.layout import SequenceLayout
from hidrop.trace import TEXTUAL, VISUAL

LAST_1R = "LastToken1R"
LAST_NR = "LastTokenNR"
LAST_NR_L2 = "LastTokenNR_L2"
ALL = "AllToken"
ALL_L2 = "AllToken_L2"
STRATEGIES = (LAST_1R, LAST_NR, LAST_NR_L2, ALL, ALL_L2)

# row labels of the token-weighting ablation table
STRATEGY_LABELS = {
    LAST_1R: "Last token (1-rounds)",
    LAST_NR: "Last token (n-rounds)",
    LAST_NR_L2: "Last token (n-rounds, L2 norm)",
    ALL: "All token",
    ALL_L2: "All token (L2 norm)",
}

VISION_ONLY = "vision_only"
CAUSAL_FULL = "causal_full"


def parse_strategy(name: str) -> str:
    if name in STRATEGIES:
        return name
    for key, label in STRATEGY_LABELS.items():
        if name.strip().lower() == label.lower():
            return key
    raise ValueError(f"unknown saliency strategy {name!r}; choose from {STRATEGIES}")


@dataclass(frozen=True)
class SaliencyConfig:
    strategy: str = LAST_NR
    rounds: Optional[tuple] = None
    softmax_domain: str = VISION_ONLY
    head_agg: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "strategy", parse_strategy(self.strategy))
        if self.softmax_domain not in (VISION_ONLY, CAUSAL_FULL):
            raise ValueError(f"softmax_domain must be {VISION_ONLY} or {CAUSAL_FULL}")
        if self.head_agg not in ("mean", "max"):
            raise ValueError("head_agg must be 'mean' or 'max'")
        if self.rounds is not None:
            if self.strategy not in (LAST_NR, LAST_NR_L2):
                raise ValueError("explicit rounds only apply to the n-rounds strategies")
            if len(self.rounds) == 0:
                raise ValueError("rounds must be nonempty")
            object.__setattr__(self, "rounds", tuple(int(r) for r in self.rounds))

    @property
    def l2(self) -> bool:
        return self.strategy in (LAST_NR_L2, ALL_L2)


def query_tokens(layout: SequenceLayout, live, cfg: SaliencyConfig) -> np.ndarray:
    """Global indices of the text tokens that act as saliency queries."""
    live = np.asarray(live, dtype=np.int64)
    mods = layout.modalities[live]
    text = live[mods == TEXTUAL]
    if text.size == 0:
        raise ValueError("no live text tokens to query with")
    if cfg.strategy == LAST_1R:
        return text[-1:]
    if cfg.strategy in (ALL, ALL_L2):
        return text
    if cfg.rounds is not None:
        rounds = np.array(cfg.rounds, dtype=np.int64)
        if not np.isin(rounds, text).all():
            raise ValueError("query rounds must be live text tokens")
        return np.unique(rounds)
    segs = layout.segments[text]
    last_of_segment = np.r_[segs[1:] != segs[:-1], True]
    return text[last_of_segment]


def saliency(q, k, layout: SequenceLayout, live, cfg: SaliencyConfig, hidden=None):
    """Score every live vision token.

    ``q`` and ``k`` are (heads, len(live), head_dim), already rotated; rows
    follow ``live`` (ascending global indices). Returns
    ``(vision_indices, scores)``.
    """
    live = np.asarray(live, dtype=np.int64)
    mods = layout.modalities[live]
    vis_cols = np.flatnonzero(mods == VISUAL)
    if vis_cols.size == 0:
        raise ValueError("no live vision tokens to score")
    queries = query_tokens(layout, live, cfg)
    q_rows = np.searchsorted(live, queries)

    if cfg.softmax_domain == VISION_ONLY:
        key_cols = vis_cols
    else:
        key_cols = np.arange(live.size)
    causal = live[key_cols][None, :] <= queries[:, None]
    bias = np.where(causal, 0.0, -np.inf)
    kk = np.asarray(k)[:, key_cols]
    _, probs = kernels.attention(np.asarray(q)[:, q_rows], kk, kk, bias, 1.0 / np.sqrt(q.shape[-1]))
    pos_in_keys = np.searchsorted(live[key_cols], live[vis_cols])
    rows = probs[:, :, pos_in_keys]  # (H, nq, n_vis)

    if cfg.l2:
        if hidden is None:
            raise ValueError(f"{cfg.strategy} needs the hidden states of the query tokens")
        norms = np.linalg.norm(np.asarray(hidden)[q_rows], axis=1)
        weights = norms / norms.sum()
    else:
        weights = np.full(queries.size, 1.0 / queries.size)
    per_head = np.einsum("q,hqv->hv", weights, rows)
    scores = per_head.mean(axis=0) if cfg.head_agg == "mean" else per_head.max(axis=0)
    return live[vis_cols], scores


def score_and_select(q, k, layout: SequenceLayout, live, cfg: SaliencyConfig, keep: int,
                     hidden=None, lam: Optional[float] = None, variant: str = HARD):
    """Saliency -> DTop-K mask -> exactly ``keep`` survivors (ascending global indices)."""
    vision, scores = saliency(q, k, layout, live, cfg, hidden)
    n = vision.size
    if not 0 < keep <= n:
        raise ValueError(f"cannot keep {keep} of {n} live vision tokens")
    mask: SoftMask = soft_mask(scores, keep_count_to_ratio(keep, n), lam, variant)
    chosen = select_exact(mask, keep)
    return mask, vision[chosen]
