"""Fixed-query cross-attention resampler.

A bank of N learnable queries attends over the flattened tokens of a
frame sequence under a FrameMask, then passes through a feed-forward
block. The output is always N x C whatever the number of input frames.

Block structure (stated explicitly so tests can target it):

    qn   = layernorm(queries; attn_norm)                    # pre-norm
    per head h (contiguous slices of width C/H):
        logits_h = qn_h @ (x_flat @ key_proj)_h^T / sqrt(C/H)
        attn_h   = masked_attend(logits_h, token_mask, (x_flat @ value_proj)_h)
    h1   = queries + concat_h(attn_h) @ out_proj            # residual
    h1n  = layernorm(h1; ffn_norm)                          # pre-norm
    y    = h1 + gelu(h1n @ ffn_in) @ ffn_out                # residual

Queries carry no separate projection (the learnable rows are the
queries), the feed-forward maps carry no biases, and keys/values are
computed from raw frame tokens; temporal position encoding is opt-in via
``add_tpe`` and applied by the caller before the forward pass.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .masks import FrameMask, MaskRule, build_full, expand_to_tokens
from .numkernel import as_matrix, masked_attend, matmul

__all__ = [
    "ProjectorConfig",
    "ProjectorParams",
    "FrameEmbeddings",
    "init_params",
    "add_tpe",
    "frame_position_encoding",
    "forward_video",
    "forward_image",
    "query_output_independence_check",
    "save_params",
    "load_params",
    "save_manifest",
    "load_manifest",
    "params_digest",
]

LAYER_NORM_EPS = 1e-6

# PRNG used for every seeded draw in the package (recorded in run reports).
PRNG_NAME = "PCG64"


@dataclass(frozen=True)
class ProjectorConfig:
    """Sizes and switches for one resampler instance."""

    model_dim: int
    input_dim: int
    n_queries: int = 1024
    n_heads: int = 8
    ffn_expansion: int = 4
    mask_rule: MaskRule = MaskRule.CCAM_FLOOR
    use_tpe: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("model_dim", "input_dim", "n_queries", "n_heads", "ffn_expansion"):
            if getattr(self, name) < 1:
                raise ValueError(f"ProjectorConfig: {name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"ProjectorConfig: model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        object.__setattr__(self, "mask_rule", MaskRule(self.mask_rule))

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_expansion * self.model_dim


@dataclass
class ProjectorParams:
    """Learnable arrays; mutable only through a trainer that owns them."""

    queries: np.ndarray       # (N, C)
    key_proj: np.ndarray      # (C_in, C)
    value_proj: np.ndarray    # (C_in, C)
    out_proj: np.ndarray      # (C, C)
    ffn_in: np.ndarray        # (C, E)
    ffn_out: np.ndarray       # (E, C)
    attn_norm_gain: np.ndarray
    attn_norm_bias: np.ndarray
    ffn_norm_gain: np.ndarray
    ffn_norm_bias: np.ndarray
    n_heads: int = 1

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def model_dim(self) -> int:
        return self.queries.shape[1]

    @property
    def input_dim(self) -> int:
        return self.key_proj.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_SECTIONS}

    def copy(self) -> "ProjectorParams":
        arrays = {name: arr.copy() for name, arr in self.as_dict().items()}
        return ProjectorParams(n_heads=self.n_heads, **arrays)


PARAM_SECTIONS = (
    "queries",
    "key_proj",
    "value_proj",
    "out_proj",
    "ffn_in",
    "ffn_out",
    "attn_norm_gain",
    "attn_norm_bias",
    "ffn_norm_gain",
    "ffn_norm_bias",
)


@dataclass(frozen=True)
class FrameEmbeddings:
    """A frame sequence: (n_frames, tokens_per_frame, channels) float64."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"FrameEmbeddings: expected 3-D data, got ndim={data.ndim}")
        if not np.isfinite(data).all():
            raise ValueError("FrameEmbeddings: non-finite entries are not allowed")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def init_params(cfg: ProjectorConfig) -> ProjectorParams:
    """Seeded Gaussian init: std 1/sqrt(fan_in) for projections, 1/sqrt(C) for queries."""
    rng = np.random.default_rng(cfg.seed)
    c, c_in, e = cfg.model_dim, cfg.input_dim, cfg.ffn_dim
    return ProjectorParams(
        queries=rng.normal(0.0, c ** -0.5, (cfg.n_queries, c)),
        key_proj=rng.normal(0.0, c_in ** -0.5, (c_in, c)),
        value_proj=rng.normal(0.0, c_in ** -0.5, (c_in, c)),
        out_proj=rng.normal(0.0, c ** -0.5, (c, c)),
        ffn_in=rng.normal(0.0, c ** -0.5, (c, e)),
        ffn_out=rng.normal(0.0, e ** -0.5, (e, c)),
        attn_norm_gain=np.ones(c),
        attn_norm_bias=np.zeros(c),
        ffn_norm_gain=np.ones(c),
        ffn_norm_bias=np.zeros(c),
        n_heads=cfg.n_heads,
    )


def frame_position_encoding(n_frames: int, channels: int) -> np.ndarray:
    """Sinusoidal encoding of the frame index, interleaved sin/cos, base period 10000."""
    pos = np.arange(n_frames, dtype=np.float64)[:, None]
    even = np.arange(0, channels, 2, dtype=np.float64)
    angles = pos * (10000.0 ** (-even / channels))
    pe = np.zeros((n_frames, channels))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : channels // 2])
    return pe


def add_tpe(frames: FrameEmbeddings) -> FrameEmbeddings:
    """Add the frame-index encoding to every token of each frame. Parameter-free."""
    pe = frame_position_encoding(frames.n_frames, frames.channels)
    return FrameEmbeddings(frames.data + pe[:, None, :])


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / np.sqrt(var + LAYER_NORM_EPS) * gain + bias


def gelu(u: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error linear unit, u * Phi(u)."""
    return 0.5 * u * (1.0 + erf(u / np.sqrt(2.0)))


def _check_forward_shapes(params: ProjectorParams, frames: FrameEmbeddings, mask: FrameMask) -> None:
    if frames.channels != params.input_dim:
        raise ValueError(
            f"frames have {frames.channels} channels but params expect {params.input_dim}"
        )
    if mask.n_queries != params.n_queries or mask.n_frames != frames.n_frames:
        raise ValueError(
            f"mask is {mask.n_queries}x{mask.n_frames} but params/frames need "
            f"{params.n_queries}x{frames.n_frames}"
        )


def _finish_from_heads(params: ProjectorParams, heads_concat: np.ndarray) -> np.ndarray:
    """Post-attention dressing: output projection, residuals, feed-forward."""
    h1 = params.queries + matmul(heads_concat, params.out_proj)
    h1n = layer_norm(h1, params.ffn_norm_gain, params.ffn_norm_bias)
    return h1 + matmul(gelu(matmul(h1n, params.ffn_in)), params.ffn_out)


def forward_video(params: ProjectorParams, frames: FrameEmbeddings, mask: FrameMask) -> np.ndarray:
    """Run the resampler over a frame sequence; returns an (N, C) matrix."""
    _check_forward_shapes(params, frames, mask)
    t, l = frames.n_frames, frames.tokens_per_frame
    x_flat = frames.data.reshape(t * l, frames.channels)
    token_mask = expand_to_tokens(mask, l)

    qn = layer_norm(params.queries, params.attn_norm_gain, params.attn_norm_bias)
    keys = matmul(x_flat, params.key_proj)
    values = matmul(x_flat, params.value_proj)

    dh = params.model_dim // params.n_heads
    scale = np.sqrt(dh)
    heads = []
    for h in range(params.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        logits = matmul(qn[:, cols], keys[:, cols].T) / scale
        heads.append(masked_attend(logits, token_mask, values[:, cols]))
    return _finish_from_heads(params, np.concatenate(heads, axis=1))


def forward_image(params: ProjectorParams, tokens) -> np.ndarray:
    """Single-frame forward pass: all queries see all tokens."""
    tokens = as_matrix(tokens, "tokens")
    frames = FrameEmbeddings(tokens[None])
    return forward_video(params, frames, build_full(params.n_queries, 1))


def query_output_independence_check(
    params: ProjectorParams, frames: FrameEmbeddings, mask: FrameMask, query_index: int
) -> np.ndarray:
    """Recompute one output row from only its visible frames.

    Returns a (1, C) matrix that must match row ``query_index`` of
    ``forward_video(params, frames, mask)``; any gap beyond rounding
    means the row leaked information from invisible frames.
    """
    if not 0 <= query_index < params.n_queries:
        raise ValueError(f"query index {query_index} out of range [0, {params.n_queries})")
    _check_forward_shapes(params, frames, mask)
    visible = np.flatnonzero(mask.bits[query_index])
    sub = FrameEmbeddings(frames.data[visible])
    full = build_full(params.n_queries, len(visible))
    return forward_video(params, sub, full)[query_index : query_index + 1]


# --- serialization ---------------------------------------------------------
#
# Flat binary layout: little-endian u64 section count, then per section
# u64 name length, name bytes (utf-8), u64 rank, u64 dims, float64 data
# (row-major). Head count travels as a rank-0 section named "n_heads".


def _write_section(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("params file truncated")
    return buf


def _read_section(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
    dims = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def save_params(params: ProjectorParams, path) -> None:
    sections = list(params.as_dict().items())
    sections.append(("n_heads", np.array(float(params.n_heads))))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(sections)))
        for name, arr in sections:
            _write_section(fh, name, np.asarray(arr))


def load_params(path) -> ProjectorParams:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        loaded = dict(_read_section(fh) for _ in range(count))
    missing = [name for name in (*PARAM_SECTIONS, "n_heads") if name not in loaded]
    if missing:
        raise ValueError(f"params file missing sections: {missing}")
    arrays = {name: loaded[name] for name in PARAM_SECTIONS}
    return ProjectorParams(n_heads=int(loaded["n_heads"]), **arrays)


def save_manifest(cfg: ProjectorConfig, path) -> None:
    """Write the textual manifest recording the config and seed."""
    doc = {
        "config": {
            "model_dim": cfg.model_dim,
            "input_dim": cfg.input_dim,
            "n_queries": cfg.n_queries,
            "n_heads": cfg.n_heads,
            "ffn_expansion": cfg.ffn_expansion,
            "mask_rule": cfg.mask_rule.value,
            "use_tpe": cfg.use_tpe,
        },
        "seed": cfg.seed,
        "prng": PRNG_NAME,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> ProjectorConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ProjectorConfig(seed=doc["seed"], **doc["config"])


def params_digest(params: ProjectorParams) -> str:
    """Content hash over the serialized sections, hex sha256."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", params.n_heads))
    for name, arr in params.as_dict().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
