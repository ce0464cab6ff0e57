"""Masked global-local training pairs.

The global signal is masked with scattered fixed-length patches, a local beat
with one contiguous span.  Masked samples are set to ``FILL_VALUE``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .signal import LocalBeat

FILL_VALUE = 0.0


@dataclass(frozen=True, eq=False)
class MaskDescriptor:
    kind: str  # "scattered_global" | "contiguous_local"
    masked_indices: np.ndarray
    mask_ratio: float
    length: int

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.length, dtype=bool)
        out[self.masked_indices] = True
        return out


@dataclass(frozen=True, eq=False)
class GlobalLocalPair:
    global_masked: np.ndarray
    local_masked: LocalBeat
    global_mask: MaskDescriptor
    local_mask: MaskDescriptor
    global_clean: np.ndarray
    local_clean: LocalBeat


def patch_starts(length: int, ratio: float, patch_len: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random starts of ``ceil(ratio * length / patch_len)`` disjoint patches."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if patch_len < 1:
        raise ConfigError(f"patch length must be >= 1, got {patch_len}")
    n_patches = math.ceil(round(ratio * length / patch_len, 9))
    slack = length - n_patches * patch_len
    if slack < 0:
        raise ConfigError(f"{n_patches} patches of {patch_len} do not fit in {length} samples")
    # uniform placement of n disjoint patches: choose n gap offsets from the
    # slack and sort them (stars and bars)
    gaps = np.sort(rng.integers(0, slack + 1, size=n_patches))
    return gaps + np.arange(n_patches) * patch_len


def mask_global(x, ratio: float, patch_len: int, rng: np.random.Generator) -> tuple[np.ndarray, MaskDescriptor]:
    values = np.asarray(getattr(x, "values", x), dtype=np.float64)
    n = values.size
    if ratio * n < patch_len:
        raise ConfigError(f"ratio {ratio} of {n} samples is shorter than one patch of {patch_len}")
    starts = patch_starts(n, ratio, patch_len, rng)
    idx = (starts[:, None] + np.arange(patch_len)[None, :]).ravel()
    out = values.copy()
    out[idx] = FILL_VALUE
    return out, MaskDescriptor("scattered_global", np.sort(idx), ratio, n)


def mask_local(beat, ratio: float, rng: np.random.Generator) -> tuple[LocalBeat | np.ndarray, MaskDescriptor]:
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    values = np.asarray(beat.values if isinstance(beat, LocalBeat) else beat, dtype=np.float64)
    n = values.size
    span = min(math.ceil(round(ratio * n, 9)), n)
    start = int(rng.integers(0, n - span + 1))
    idx = np.arange(start, start + span)
    out = values.copy()
    out[idx] = FILL_VALUE
    desc = MaskDescriptor("contiguous_local", idx, ratio, n)
    if isinstance(beat, LocalBeat):
        return LocalBeat(out, beat.origin_index), desc
    return out, desc


def select_training_beat(beats: Sequence[LocalBeat], rng: np.random.Generator) -> LocalBeat:
    if not beats:
        raise ContractError("no beats to select from; use the global-only path")
    return beats[int(rng.integers(0, len(beats)))]


def make_pair(
    global_clean: np.ndarray,
    beats: Sequence[LocalBeat],
    rng: np.random.Generator,
    global_ratio: float = 0.3,
    local_ratio: float = 0.5,
    patch_len: int = 50,
) -> GlobalLocalPair:
    beat = select_training_beat(beats, rng)
    g, gmask = mask_global(global_clean, global_ratio, patch_len, rng)
    l, lmask = mask_local(beat, local_ratio, rng)
    return GlobalLocalPair(g, l, gmask, lmask, np.asarray(global_clean, dtype=np.float64), beat)
