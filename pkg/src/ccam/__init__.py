"""Causal cross-attention resampler with numerical verification harnesses.

A fixed bank of learnable queries compresses a frame sequence of any
length into an N x C matrix via masked cross-attention plus a
feed-forward block. Prefix masks over frames make early queries see
early frames only, which keeps the output sensitive to temporal order
while remaining consistent across different frame sampling rates.
"""

__version__ = "0.1.0"

from .numkernel import TokenMask, as_matrix, masked_attend, matmul, rowwise_weights
from .masks import (
    FrameMask,
    MaskRule,
    build_ccam_continuous,
    build_ccam_floor,
    build_full,
    expand_to_tokens,
)
from .projector import (
    FrameEmbeddings,
    ProjectorConfig,
    ProjectorParams,
    add_tpe,
    forward_image,
    forward_video,
    init_params,
    load_manifest,
    load_params,
    query_output_independence_check,
    save_manifest,
    save_params,
)
from .consistency import (
    ContinuousVideoSignal,
    ConvergenceReport,
    convergence_run,
    cross_count_consistency,
    make_constant_signal,
    make_signal,
    quadrature_reference,
    sample_frames,
)
from .gradcheck import (
    Gradients,
    OrderDataset,
    TrainReport,
    TrainingDivergedError,
    backward,
    finite_diff,
    make_order_dataset,
    train_order_probe,
)

__all__ = [
    "__version__",
    "TokenMask", "as_matrix", "masked_attend", "matmul", "rowwise_weights",
    "FrameMask", "MaskRule", "build_full", "build_ccam_floor", "build_ccam_continuous",
    "expand_to_tokens",
    "FrameEmbeddings", "ProjectorConfig", "ProjectorParams", "add_tpe",
    "forward_image", "forward_video", "init_params", "query_output_independence_check",
    "save_params", "load_params", "save_manifest", "load_manifest",
    "ContinuousVideoSignal", "ConvergenceReport", "make_signal", "make_constant_signal",
    "sample_frames", "quadrature_reference", "convergence_run", "cross_count_consistency",
    "Gradients", "OrderDataset", "TrainReport", "TrainingDivergedError",
    "backward", "finite_diff", "make_order_dataset", "train_order_probe",
]
