"""Layer set used by the 3D encoder, the ViT-lite pair and the correspondence decoder.

Everything is a thin layer over torch autograd. The extra value here is shape
checking with readable errors, the package's initialization rule, masked
batch-norm for densified sparse grids, and fixed sinusoidal encodings.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import DimensionError, InvalidInputError

INIT_STD = 0.02


def _check(op: str, ok: bool, detail: str):
    if not ok:
        raise DimensionError(f"{op}: {detail}")


def trunc_normal_(t: torch.Tensor, std: float = INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class Linear(nn.Linear):
    def reset_parameters(self):
        trunc_normal_(self.weight)
        if self.bias is not None:
            nn.init.zeros_(self.bias)

    def forward(self, x):
        _check("linear", x.shape[-1] == self.in_features,
               f"input axis -1 has size {x.shape[-1]}, expected {self.in_features}")
        return super().forward(x)


class Conv2d(nn.Conv2d):
    def forward(self, x):
        _check("conv2d", x.ndim == 4 and x.shape[1] == self.in_channels,
               f"input {tuple(x.shape)}: axis 1 must be {self.in_channels} channels of a 4-d tensor")
        return super().forward(x)


class Conv3d(nn.Conv3d):
    def forward(self, x):
        _check("conv3d", x.ndim == 5 and x.shape[1] == self.in_channels,
               f"input {tuple(x.shape)}: axis 1 must be {self.in_channels} channels of a 5-d tensor")
        return super().forward(x)


class ConvTranspose3d(nn.ConvTranspose3d):
    def forward(self, x):
        _check("conv_transpose3d", x.ndim == 5 and x.shape[1] == self.in_channels,
               f"input {tuple(x.shape)}: axis 1 must be {self.in_channels} channels of a 5-d tensor")
        return super().forward(x)


class LayerNorm(nn.LayerNorm):
    def forward(self, x):
        _check("layer_norm", tuple(x.shape[-len(self.normalized_shape):]) == tuple(self.normalized_shape),
               f"trailing axes {tuple(x.shape)} do not end in {tuple(self.normalized_shape)}")
        return super().forward(x)


class MaskedBatchNorm(nn.Module):
    """Batch norm whose statistics only see active sites.

    A dense tensor standing in for a sparse one has zeros at empty cells; those
    must not drag the batch mean toward zero. ``mask`` is broadcastable to
    ``(B, 1, *spatial)``. Output is zero at inactive sites.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        _check("batch_norm", x.ndim >= 2 and x.shape[1] == self.num_features,
               f"input {tuple(x.shape)}: axis 1 must have {self.num_features} channels")
        shape = [1, -1] + [1] * (x.ndim - 2)
        if mask is None:
            mask = torch.ones((x.shape[0], 1) + tuple(x.shape[2:]), dtype=x.dtype)
        mask = mask.to(x.dtype)
        if self.training:
            dims = [0] + list(range(2, x.ndim))
            n = mask.sum().clamp_min(1.0)
            mean = (x * mask).sum(dim=dims) / n
            centered = (x - mean.view(shape)) * mask
            var = (centered * centered).sum(dim=dims) / n
            with torch.no_grad():
                unbiased = var * (n / (n - 1)) if n > 1 else var
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.detach())
        else:
            mean, var = self.running_mean, self.running_var
        y = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + self.eps)
        return (y * self.weight.view(shape) + self.bias.view(shape)) * mask


relu = F.relu
gelu = F.gelu


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def concat(tensors: Sequence[torch.Tensor], dim: int) -> torch.Tensor:
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        _check("concat", t.ndim == ref.ndim, f"operand {i} has {t.ndim} axes, operand 0 has {ref.ndim}")
        for ax in range(ref.ndim):
            if ax == dim % ref.ndim:
                continue
            _check("concat", t.shape[ax] == ref.shape[ax],
                   f"axis {ax} differs: operand 0 has {ref.shape[ax]}, operand {i} has {t.shape[ax]}")
    return torch.cat(list(tensors), dim=dim)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check("mse", a.shape == b.shape, f"shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return ((a - b) ** 2).mean()


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; self-attention when ``context`` is None."""

    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise InvalidInputError(f"dim {dim} is not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.dim, self.heads, self.context_dim = dim, heads, context_dim
        self.q = Linear(dim, dim)
        self.k = Linear(context_dim, dim)
        self.v = Linear(context_dim, dim)
        self.out = Linear(dim, dim)

    def attention_weights(self, query, context=None):
        context = query if context is None else context
        B, Q, _ = query.shape
        T = context.shape[1]
        h, d = self.heads, self.dim // self.heads
        q = self.q(query).view(B, Q, h, d).transpose(1, 2)
        k = self.k(context).view(B, T, h, d).transpose(1, 2)
        return softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)

    def forward(self, query: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        _check("multi_head_attention", query.ndim == 3 and query.shape[-1] == self.dim,
               f"query {tuple(query.shape)} must be (batch, tokens, {self.dim})")
        if context is not None:
            _check("multi_head_attention", context.ndim == 3 and context.shape[-1] == self.context_dim,
                   f"context {tuple(context.shape)} must be (batch, tokens, {self.context_dim})")
            _check("multi_head_attention", context.shape[0] == query.shape[0],
                   f"batch axis 0 differs: query {query.shape[0]}, context {context.shape[0]}")
        ctx = query if context is None else context
        B, Q, _ = query.shape
        T = ctx.shape[1]
        h, d = self.heads, self.dim // self.heads
        attn = self.attention_weights(query, context)
        v = self.v(ctx).view(B, T, h, d).transpose(1, 2)
        return self.out((attn @ v).transpose(1, 2).reshape(B, Q, self.dim))


def positional_encoding(coords: torch.Tensor, dim: int, max_freq: float = 16.0) -> torch.Tensor:
    """Fixed sinusoidal encoding of 2-D coordinates in [0, 1]².

    Half the channels encode x, half encode y; each half holds sin/cos pairs at
    frequencies spaced geometrically from 1 to ``max_freq`` cycles per unit.
    """
    if dim % 4:
        raise InvalidInputError(f"positional encoding dim must be a multiple of 4, got {dim}")
    _check("positional_encoding", coords.shape[-1] == 2, f"coords axis -1 has size {coords.shape[-1]}, expected 2")
    n = dim // 4
    freqs = max_freq ** torch.linspace(0.0, 1.0, n, dtype=coords.dtype) if n > 1 else torch.ones(1, dtype=coords.dtype)
    parts = []
    for axis in range(2):
        ang = 2 * math.pi * coords[..., axis:axis + 1] * freqs
        parts += [torch.sin(ang), torch.cos(ang)]
    return torch.cat(parts, dim=-1)


def grid_coords(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """(H*W, 2) normalized (x, y) coordinates of pixel centers, row-major."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype) / height,
                            torch.arange(width, dtype=dtype) / width, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def assert_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {where}")
    return t
