"""Token layout of a multimodal prompt and position-id bookkeeping.

Sequence order is ``[system : vision : text segments]`` and token indices
follow it. Position ids depend on the PE mode:

Persistent
    ids equal indices, assigned once and never changed.
Compacted
    same initial ids; after each prune the surviving vision tokens are renumbered
    consecutively from the vision-block origin and later tokens shift down.
Group
    system/text tokens take ``0..N_t-1``, vision tokens
    ``group_offset..group_offset+N_v-1``; nothing changes afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from hidrop.trace import SYSTEM, TEXTUAL, VISUAL

PERSISTENT = "persistent"
COMPACTED = "compacted"
GROUP = "group"
PE_VARIANTS = (PERSISTENT, COMPACTED, GROUP)


class Token(NamedTuple):
    index: int
    modality: str
    position_id: int
    segment: int


@dataclass(frozen=True)
class PeMode:
    variant: str = PERSISTENT
    group_offset: int = 4096

    def __post_init__(self):
        if self.variant not in PE_VARIANTS:
            raise ValueError(f"PE variant must be one of {PE_VARIANTS}, got {self.variant!r}")
        if self.group_offset < 0:
            raise ValueError("group_offset must be nonnegative")


@dataclass(frozen=True)
class SequenceLayout:
    tokens: tuple
    live_at: Optional[np.ndarray] = None  # (L + 1, T) bool, filled in by a forward pass

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def modalities(self) -> np.ndarray:
        return np.array([t.modality for t in self.tokens])

    @property
    def positions(self) -> np.ndarray:
        return np.array([t.position_id for t in self.tokens], dtype=np.int64)

    @property
    def segments(self) -> np.ndarray:
        return np.array([t.segment for t in self.tokens], dtype=np.int64)

    def indices(self, modality: str) -> np.ndarray:
        return np.array([t.index for t in self.tokens if t.modality == modality], dtype=np.int64)

    @property
    def vision(self) -> np.ndarray:
        return self.indices(VISUAL)

    @property
    def non_vision(self) -> np.ndarray:
        return np.array([t.index for t in self.tokens if t.modality != VISUAL], dtype=np.int64)

    @property
    def n_vision(self) -> int:
        return int(self.vision.size)

    def with_liveness(self, live_at: np.ndarray) -> "SequenceLayout":
        return replace(self, live_at=live_at)


def build_layout(n_system: int, n_vision: int, text_segments: Sequence[int],
                 pe: PeMode = PeMode()) -> SequenceLayout:
    """System prefix, vision block, then one or more text segments (conversation turns)."""
    if n_system < 0 or n_vision < 0 or any(s <= 0 for s in text_segments):
        raise ValueError("token counts must be nonnegative and text segments nonempty")
    if not text_segments:
        raise ValueError("at least one text segment is required")
    mods: List[tuple] = [(SYSTEM, 0)] * n_system + [(VISUAL, 0)] * n_vision
    for seg, length in enumerate(text_segments, start=1):
        mods += [(TEXTUAL, seg)] * length
    tokens = []
    text_pos = 0
    vis_pos = 0
    for i, (mod, seg) in enumerate(mods):
        if pe.variant == GROUP:
            if mod == VISUAL:
                pos = pe.group_offset + vis_pos
                vis_pos += 1
            else:
                pos = text_pos
                text_pos += 1
        else:
            pos = i
        tokens.append(Token(i, mod, pos, seg))
    if pe.variant == GROUP and text_pos > pe.group_offset:
        raise ValueError("group_offset must exceed the number of text/system tokens")
    return SequenceLayout(tuple(tokens))


def apply_pe(positions, layout: SequenceLayout, pe: PeMode, live_vision, survivors) -> np.ndarray:
    """Position ids after a prune event that keeps ``survivors`` out of ``live_vision``."""
    positions = np.asarray(positions, dtype=np.int64).copy()
    live_vision = np.asarray(live_vision, dtype=np.int64)
    survivors = np.sort(np.asarray(survivors, dtype=np.int64))
    if not np.isin(survivors, live_vision).all():
        raise ValueError("survivors must be a subset of the live vision tokens")
    if pe.variant != COMPACTED or live_vision.size == 0:
        return positions
    origin = positions[live_vision].min()
    removed = live_vision.size - survivors.size
    non_vision = layout.non_vision
    later = non_vision[positions[non_vision] > origin]
    positions[later] -= removed
    positions[survivors] = origin + np.arange(survivors.size)
    live = np.concatenate([non_vision, survivors])
    if np.unique(positions[live]).size != live.size:
        raise RuntimeError("compacted position ids collide")
    return positions
