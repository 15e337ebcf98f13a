"""Differentiable substrate: layers, AdamW and gradient checking."""

from .gradcheck import GradCheckReport, grad_check
from .layers import (
    Conv2d,
    Conv3d,
    ConvTranspose3d,
    LayerNorm,
    Linear,
    MaskedBatchNorm,
    MultiHeadAttention,
    assert_finite,
    concat,
    gelu,
    grid_coords,
    mse,
    positional_encoding,
    relu,
    softmax,
)
from .optim import AdamW, OptimizerState, adamw_step

__all__ = [
    "AdamW", "Conv2d", "Conv3d", "ConvTranspose3d", "GradCheckReport", "LayerNorm", "Linear",
    "MaskedBatchNorm", "MultiHeadAttention", "OptimizerState", "adamw_step", "assert_finite",
    "concat", "gelu", "grad_check", "grid_coords", "mse", "positional_encoding", "relu", "softmax",
]
