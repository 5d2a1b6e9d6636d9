"""Dense matrix and masked attention-weighting kernels.

Everything operates on 2-D float64 numpy arrays. Masks are hard
visibility constraints: a masked position contributes exactly 0.0 to the
attention sums. We never feed -inf logits through exp; masked entries
are excluded from the row-max shift and skipped by the exponential, so
zero contribution is exact rather than a rounding accident.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TokenMask", "as_matrix", "matmul", "masked_attend", "rowwise_weights"]


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting NaN/Inf entries."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got ndim={a.ndim}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name}: non-finite entries (NaN/Inf) are not allowed")
    return a


@dataclass(frozen=True)
class TokenMask:
    """Query-by-token boolean visibility; every query must see >= 1 token."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"TokenMask: expected 2-D bits, got ndim={bits.ndim}")
        seen = bits.any(axis=1)
        if not seen.all():
            row = int(np.flatnonzero(~seen)[0])
            raise ValueError(f"TokenMask: query {row} sees no tokens")
        object.__setattr__(self, "bits", bits)

    @property
    def n_queries(self) -> int:
        return self.bits.shape[0]

    @property
    def n_keys(self) -> int:
        return self.bits.shape[1]


def matmul(a, b) -> np.ndarray:
    """Dense product with shape validation, float64 accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def _as_token_mask(mask, shape) -> TokenMask:
    if not isinstance(mask, TokenMask):
        mask = TokenMask(np.asarray(mask))
    if mask.bits.shape != shape:
        raise ValueError(
            f"mask shape {mask.bits.shape[0]}x{mask.bits.shape[1]} does not match "
            f"logits {shape[0]}x{shape[1]}"
        )
    return mask


def rowwise_weights(logits, mask) -> np.ndarray:
    """Masked softmax weights per row.

    Nonnegative, exactly 0.0 at masked positions, each row sums to 1.
    The shift uses the per-row maximum over visible entries only.
    """
    logits = as_matrix(logits, "logits")
    mask = _as_token_mask(mask, logits.shape)
    bits = mask.bits
    # Every row has >= 1 visible entry, so the -inf initial never survives.
    shift = np.amax(logits, axis=1, where=bits, initial=-np.inf, keepdims=True)
    w = np.zeros_like(logits)
    np.exp(logits - shift, out=w, where=bits)
    return w / w.sum(axis=1, keepdims=True)


def masked_attend(logits, mask, values) -> np.ndarray:
    """Softmax-weighted combination of value rows under a visibility mask.

    Row i is sum_j w_ij * values[j] with w = rowwise_weights(logits, mask);
    rows the mask hides contribute exactly zero.
    """
    w = rowwise_weights(logits, mask)
    values = as_matrix(values, "values")
    if values.shape[0] != w.shape[1]:
        raise ValueError(
            f"masked_attend: {w.shape[1]} keys but values has {values.shape[0]} rows"
        )
    return w @ values
