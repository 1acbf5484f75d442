"""Frame-level masks and the lexicographic combination index.

A mask hides whole temporal slots: every spatial token of a masked slot is
dropped. A ComboIndex names a sorted k-subset of slots by its rank in
lexicographic order, e.g. for t_tok=8, k=2: 0 -> (0, 1), 7 -> (1, 2), 27 -> (6, 7).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class FrameMask:
    masked: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "masked", tuple(bool(m) for m in self.masked))

    @property
    def t_tok(self) -> int:
        return len(self.masked)

    @property
    def masked_count(self) -> int:
        return sum(self.masked)

    @property
    def masked_slots(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.masked) if m)

    @property
    def visible_slots(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.masked) if not m)

    @property
    def ratio(self) -> float:
        return self.masked_count / self.t_tok

    def as_array(self) -> np.ndarray:
        return np.array(self.masked, dtype=bool)


@dataclass(frozen=True)
class MaskBookkeeping:
    """Flat token indices (time-major) of visible and masked positions."""

    visible: np.ndarray
    masked: np.ndarray
    t_tok: int
    s_tok: int


def make_frame_mask(t_tok: int, masked_count: int, rng_seed) -> FrameMask:
    if not 0 <= masked_count <= t_tok:
        raise ValueError(f"masked_count={masked_count} outside [0, {t_tok}]")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    masked = np.zeros(t_tok, dtype=bool)
    masked[rng.choice(t_tok, size=masked_count, replace=False)] = True
    return FrameMask(tuple(masked))


def num_combos(t_tok: int, k: int) -> int:
    return comb(t_tok, k)


def combo_to_slots(index: int, t_tok: int = 8, k: int = 2) -> tuple[int, ...]:
    """Unrank a lexicographic k-subset of ``range(t_tok)``."""
    total = comb(t_tok, k)
    if not 0 <= index < total:
        raise ValueError(f"combo index {index} outside [0, {total}) for t_tok={t_tok}, k={k}")
    slots = []
    lo = 0
    for remaining in range(k, 0, -1):
        # walk candidates; each choice of `s` skips comb(t_tok - s - 1, remaining - 1) subsets
        s = lo
        while True:
            block = comb(t_tok - s - 1, remaining - 1)
            if index < block:
                break
            index -= block
            s += 1
        slots.append(s)
        lo = s + 1
    return tuple(slots)


def slots_to_combo(slots: Sequence[int], t_tok: int = 8) -> int:
    """Lexicographic rank of a sorted, duplicate-free slot list."""
    slots = [int(s) for s in slots]
    k = len(slots)
    if k == 0 or k > t_tok:
        raise ValueError(f"need 1..{t_tok} slots, got {k}")
    if len(set(slots)) != k:
        raise ValueError(f"duplicate slots in {slots}")
    if slots != sorted(slots):
        raise ValueError(f"slots must be sorted, got {slots}")
    if slots[0] < 0 or slots[-1] >= t_tok:
        raise ValueError(f"slots {slots} outside [0, {t_tok})")
    index = 0
    prev = -1
    for i, s in enumerate(slots):
        remaining = k - i
        for skipped in range(prev + 1, s):
            index += comb(t_tok - skipped - 1, remaining - 1)
        prev = s
    return index


def all_combos(t_tok: int = 8, k: int = 2) -> list[tuple[int, ...]]:
    return list(combinations(range(t_tok), k))


def mask_from_combo(index: int, t_tok: int = 8, k: int = 2) -> FrameMask:
    """Keep the combo's slots visible and mask every other slot."""
    keep = set(combo_to_slots(index, t_tok, k))
    return FrameMask(tuple(i not in keep for i in range(t_tok)))


def mask_from_keep(keep_slots: Sequence[int], t_tok: int) -> FrameMask:
    keep = {int(s) for s in keep_slots}
    if len(keep) != len(keep_slots):
        raise ValueError(f"duplicate keep slots in {list(keep_slots)}")
    for s in keep:
        if not 0 <= s < t_tok:
            raise ValueError(f"keep slot {s} outside [0, {t_tok})")
    return FrameMask(tuple(i not in keep for i in range(t_tok)))


def bookkeeping(mask: FrameMask, s_tok: int) -> MaskBookkeeping:
    per_slot = np.arange(s_tok)
    vis = [s * s_tok + per_slot for s in mask.visible_slots]
    hid = [s * s_tok + per_slot for s in mask.masked_slots]
    empty = np.zeros(0, dtype=np.int64)
    return MaskBookkeeping(
        visible=np.concatenate(vis).astype(np.int64) if vis else empty,
        masked=np.concatenate(hid).astype(np.int64) if hid else empty,
        t_tok=mask.t_tok,
        s_tok=s_tok,
    )


def apply_mask(tokens, mask: FrameMask):
    """Drop masked slots from a ``[t_tok, s_tok, D]`` grid.

    Returns the visible rows ``[(t_tok - m) * s_tok, D]`` in original order
    and the bookkeeping needed to scatter them back.
    """
    arr = tokens.tokens if hasattr(tokens, "tokens") else tokens
    if arr.ndim != 3:
        raise ValueError(f"tokens must be [t_tok, s_tok, D], got shape {tuple(arr.shape)}")
    if arr.shape[0] != mask.t_tok:
        raise ValueError(f"mask covers {mask.t_tok} slots but tokens have {arr.shape[0]}")
    t_tok, s_tok, dim = arr.shape
    book = bookkeeping(mask, s_tok)
    flat = arr.reshape(t_tok * s_tok, dim)
    if isinstance(flat, np.ndarray):
        return flat[book.visible], book
    return flat[torch.as_tensor(book.visible)], book
