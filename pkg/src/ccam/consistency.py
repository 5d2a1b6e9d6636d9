"""Continuous-signal consistency harness.

Treats a frame sequence as samples of a band-limited signal
x(t): [0, duration] -> (tokens, channels), and checks that resampler
outputs computed from different frame counts approach a common integral
reference. For query i the reference replaces the attention sums with
left-Riemann integrals truncated at t_i = (i + 1) / N * duration; the
discrete pass with the continuous prefix rule is exactly the same sum
evaluated on a coarser grid, so the error must vanish as the frame
count grows (first order, since the signals are Lipschitz).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .masks import build_ccam_continuous, expand_to_tokens
from .projector import (
    FrameEmbeddings,
    ProjectorParams,
    _finish_from_heads,
    forward_video,
    layer_norm,
    params_digest,
)

__all__ = [
    "ContinuousVideoSignal",
    "ConvergenceReport",
    "make_signal",
    "make_constant_signal",
    "sample_frames",
    "quadrature_reference",
    "convergence_run",
    "cross_count_consistency",
]

MAX_HARMONICS = 7
AMPLITUDE_BUDGET = 3.0


@dataclass(frozen=True)
class ContinuousVideoSignal:
    """Truncated-Fourier signal: x(t)[l, c] = sum_k a sin(w t + phase).

    Component amplitudes satisfy sum_k |a| <= AMPLITUDE_BUDGET, so the
    signal is bounded; frequencies are capped, so it is Lipschitz.
    """

    duration: float
    amplitudes: np.ndarray    # (tokens, channels, n_harmonics)
    angular_freqs: np.ndarray
    phases: np.ndarray
    seed: int

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        for name in ("amplitudes", "angular_freqs", "phases"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != np.shape(self.amplitudes):
                raise ValueError("harmonic arrays must share one (tokens, channels, K) shape")
            object.__setattr__(self, name, arr)
        if (np.abs(self.amplitudes).sum(axis=-1) > AMPLITUDE_BUDGET + 1e-12).any():
            raise ValueError(f"component amplitude sums exceed the budget {AMPLITUDE_BUDGET}")

    @property
    def tokens_per_frame(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def channels(self) -> int:
        return self.amplitudes.shape[1]

    def evaluate(self, times) -> np.ndarray:
        """Evaluate at the given times; returns (len(times), tokens, channels)."""
        t = np.asarray(times, dtype=np.float64).reshape(-1)
        phase = self.angular_freqs[None] * t[:, None, None, None] + self.phases[None]
        return (self.amplitudes[None] * np.sin(phase)).sum(axis=-1)


def make_signal(
    tokens_per_frame: int,
    channels: int,
    duration: float,
    seed: int,
    max_harmonics: int = MAX_HARMONICS,
) -> ContinuousVideoSignal:
    """Draw a random band-limited signal, deterministic in the seed.

    Frequencies stay below 0.12 cycles per duration, far under the
    sixteen-cycle band limit. Gentle slopes keep left-Riemann sums in
    their first-order regime already at eight frames and leave an
    8192-point reference grid converged to better than 1e-6, while the
    per-count errors remain orders of magnitude above rounding noise.
    """
    if tokens_per_frame < 1 or channels < 1:
        raise ValueError(
            f"signal dims must be >= 1, got tokens={tokens_per_frame}, channels={channels}"
        )
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    shape = (tokens_per_frame, channels, max_harmonics)
    raw = rng.uniform(0.2, 1.0, shape)
    total = rng.uniform(0.1, 0.3, (tokens_per_frame, channels, 1))
    amplitudes = raw * (total / raw.sum(axis=-1, keepdims=True))
    two_pi = 2.0 * np.pi
    angular_freqs = rng.uniform(0.02 * two_pi, 0.12 * two_pi, shape) / duration
    phases = rng.uniform(0.0, two_pi, shape)
    return ContinuousVideoSignal(duration, amplitudes, angular_freqs, phases, seed)


def make_constant_signal(
    tokens_per_frame: int, channels: int, duration: float, value: float = 1.0, seed: int = 0
) -> ContinuousVideoSignal:
    """Constant signal x(t) = value: one zero-frequency harmonic at phase pi/2."""
    shape = (tokens_per_frame, channels, 1)
    return ContinuousVideoSignal(
        duration,
        np.full(shape, float(value)),
        np.zeros(shape),
        np.full(shape, np.pi / 2.0),
        seed,
    )


def sample_frames(sig: ContinuousVideoSignal, n_frames: int) -> FrameEmbeddings:
    """Left-endpoint sampling: frame j = x(j * duration / n_frames)."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    times = np.arange(n_frames) * (sig.duration / n_frames)
    return FrameEmbeddings(sig.evaluate(times))


def quadrature_reference(
    params: ProjectorParams, sig: ContinuousVideoSignal, grid_points: int = 8192
) -> np.ndarray:
    """Integral reference output on a fine left-Riemann grid.

    For each query the attention numerator and denominator are Riemann
    sums over grid samples with g * dt <= t_i (dt cancels in the ratio
    but is kept to mirror the integral form); the post-attention
    dressing is shared with the discrete forward pass so the two
    outputs are directly comparable.
    """
    n = params.n_queries
    if grid_points < 2 * n:
        raise ValueError(f"grid_points {grid_points} too coarse, need >= 2 * n_queries = {2 * n}")
    if sig.channels != params.input_dim:
        raise ValueError(f"signal has {sig.channels} channels but params expect {params.input_dim}")

    l = sig.tokens_per_frame
    dt = sig.duration / grid_points
    samples = sig.evaluate(np.arange(grid_points) * dt)
    x_flat = samples.reshape(grid_points * l, sig.channels)

    # Same truncation rule as the discrete pass: g * dt <= t_i.
    token_bits = expand_to_tokens(build_ccam_continuous(n, grid_points), l).bits

    qn = layer_norm(params.queries, params.attn_norm_gain, params.attn_norm_bias)
    keys = x_flat @ params.key_proj
    values = x_flat @ params.value_proj

    dh = params.model_dim // params.n_heads
    scale = np.sqrt(dh)
    heads = []
    for h in range(params.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        logits = qn[:, cols] @ keys[:, cols].T / scale
        shift = np.amax(logits, axis=1, where=token_bits, initial=-np.inf, keepdims=True)
        w = np.zeros_like(logits)
        np.exp(logits - shift, out=w, where=token_bits)
        numerator = (w * dt) @ values[:, cols]
        denominator = (w * dt).sum(axis=1, keepdims=True)
        heads.append(numerator / denominator)
    return _finish_from_heads(params, np.concatenate(heads, axis=1))


@dataclass(frozen=True)
class ConvergenceReport:
    """Per-frame-count error against the quadrature reference."""

    frame_counts: tuple[int, ...]
    errors: tuple[float, ...]
    slope: float
    seed: int
    config_digest: str

    def __post_init__(self):
        counts = tuple(int(c) for c in self.frame_counts)
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"frame counts must be strictly increasing, got {counts}")
        errors = tuple(float(e) for e in self.errors)
        if any(e < 0 for e in errors):
            raise ValueError("errors must be nonnegative")
        object.__setattr__(self, "frame_counts", counts)
        object.__setattr__(self, "errors", errors)


def _max_relative_row_error(candidate: np.ndarray, reference: np.ndarray) -> float:
    num = np.linalg.norm(candidate - reference, axis=1)
    den = np.linalg.norm(reference, axis=1)
    return float((num / den).max())


def _run_digest(params: ProjectorParams, sig: ContinuousVideoSignal) -> str:
    h = hashlib.sha256()
    h.update(params_digest(params).encode())
    for arr in (sig.amplitudes, sig.angular_freqs, sig.phases):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(np.float64(sig.duration).tobytes())
    return h.hexdigest()


def convergence_run(
    params: ProjectorParams,
    sig: ContinuousVideoSignal,
    frame_counts,
    grid_points: int = 8192,
) -> ConvergenceReport:
    """Error vs the quadrature reference for each frame count.

    e(T) is the max over queries of the relative L2 row distance; the
    slope is the least-squares fit of log e against log T.
    """
    counts = [int(c) for c in frame_counts]
    reference = quadrature_reference(params, sig, grid_points)
    errors = []
    for count in counts:
        out = forward_video(
            params, sample_frames(sig, count), build_ccam_continuous(params.n_queries, count)
        )
        errors.append(_max_relative_row_error(out, reference))
    logs = np.log(np.maximum(errors, 1e-300))
    slope = float(np.polyfit(np.log(counts), logs, 1)[0])
    return ConvergenceReport(tuple(counts), tuple(errors), slope, sig.seed, _run_digest(params, sig))


def cross_count_consistency(
    params: ProjectorParams, sig: ContinuousVideoSignal, count_a: int, count_b: int
) -> float:
    """Relative Frobenius gap between outputs at two frame counts."""
    out_a = forward_video(
        params, sample_frames(sig, count_a), build_ccam_continuous(params.n_queries, count_a)
    )
    out_b = forward_video(
        params, sample_frames(sig, count_b), build_ccam_continuous(params.n_queries, count_b)
    )
    return float(np.linalg.norm(out_a - out_b) / np.linalg.norm(out_b))
