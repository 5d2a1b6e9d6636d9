"""Frame-visibility masks that expose a growing prefix of frames to queries.

Two prefix rules are provided:

* floor rule: query i sees frame j iff ``i >= j * floor(N / T)``,
* continuous rule: query i sees frame j iff ``j * N <= (i + 1) * T``,

where N is the query count and T the frame count. The two disagree at
block boundaries (e.g. N=4, T=2, query 1 sees one frame under the floor
rule but both under the continuous rule), so both are surfaced and
callers pick. The continuous rule is the one whose error vanishes under
grid refinement in the consistency experiments; the floor rule is the
default elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numkernel import TokenMask

__all__ = [
    "MaskRule",
    "FrameMask",
    "build_full",
    "build_ccam_floor",
    "build_ccam_continuous",
    "expand_to_tokens",
]


class MaskRule(str, Enum):
    FULL = "full"
    CCAM_FLOOR = "ccam-floor"
    CCAM_CONTINUOUS = "ccam-continuous"


@dataclass(frozen=True)
class FrameMask:
    """Query-by-frame visibility with prefix structure.

    Invariants, checked on construction: every row is a non-empty prefix
    of the frame axis, prefix lengths are non-decreasing in the query
    index, and the last query sees every frame.
    """

    bits: np.ndarray
    rule: MaskRule

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"FrameMask: expected non-empty 2-D bits, got shape {bits.shape}")
        if not bits[:, 0].all():
            raise ValueError("FrameMask: every row must see frame 0")
        if bits.shape[1] > 1 and (~bits[:, :-1] & bits[:, 1:]).any():
            raise ValueError("FrameMask: rows must be prefixes of the frame axis")
        if bits.shape[0] > 1 and (bits[:-1] & ~bits[1:]).any():
            raise ValueError("FrameMask: visible prefixes must not shrink with the query index")
        if not bits[-1].all():
            raise ValueError("FrameMask: the last query must see every frame")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "rule", MaskRule(self.rule))

    @property
    def n_queries(self) -> int:
        return self.bits.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bits.shape[1]


def _check_dims(n_queries: int, n_frames: int) -> None:
    if n_queries < 1 or n_frames < 1:
        raise ValueError(f"mask dimensions must be >= 1, got {n_queries} queries, {n_frames} frames")


def build_full(n_queries: int, n_frames: int) -> FrameMask:
    """Every query sees every frame."""
    _check_dims(n_queries, n_frames)
    return FrameMask(np.ones((n_queries, n_frames), dtype=bool), MaskRule.FULL)


def build_ccam_floor(n_queries: int, n_frames: int) -> FrameMask:
    """Prefix mask with block size floor(N / T): query i sees frame j iff i >= j * block."""
    _check_dims(n_queries, n_frames)
    if n_queries < n_frames:
        raise ValueError(
            f"ccam-floor needs n_queries >= n_frames ({n_queries} < {n_frames}): "
            f"floor(N/T) = 0 would degenerate to a full mask; use ccam-continuous instead"
        )
    block = n_queries // n_frames
    i = np.arange(n_queries)[:, None]
    j = np.arange(n_frames)[None, :]
    return FrameMask(i >= j * block, MaskRule.CCAM_FLOOR)


def build_ccam_continuous(n_queries: int, n_frames: int) -> FrameMask:
    """Prefix mask from the proportional cutoff: query i sees frame j iff j*N <= (i+1)*T."""
    _check_dims(n_queries, n_frames)
    i = np.arange(n_queries)[:, None]
    j = np.arange(n_frames)[None, :]
    return FrameMask(j * n_queries <= (i + 1) * n_frames, MaskRule.CCAM_CONTINUOUS)


def expand_to_tokens(mask: FrameMask, tokens_per_frame: int) -> TokenMask:
    """Replicate each frame column once per token, preserving frame order."""
    if tokens_per_frame < 1:
        raise ValueError(f"tokens_per_frame must be >= 1, got {tokens_per_frame}")
    return TokenMask(np.repeat(mask.bits, tokens_per_frame, axis=1))
