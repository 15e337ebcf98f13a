"""Cross-view correspondence prediction from two projected feature maps.

Coordinates live on the side-by-side canvas of the two views, ``[0, 1]²`` over
an H x 2W image: view 1 occupies canvas x in [0, 0.5), view 2 occupies [0.5, 1].
Per-view normalized coordinates are converted at this module's boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .cloud import FeatureMap
from .errors import InvalidInputError, InvalidQueryError, UndefinedLossError
from .geometry import CorrespondenceSet
from .nn import LayerNorm, Linear, MultiHeadAttention, concat, gelu, grid_coords, positional_encoding

DEFAULT_LAMBDA = 0.5


@dataclass
class DecoderConfig:
    layers: int = 3
    heads: int = 4
    dim: int = 96
    query_pos_dim: int = 96
    mlp_ratio: int = 2


@dataclass(eq=False)
class ConcatContext:
    tokens: torch.Tensor  # (H * 2W, C), row-major over the canvas
    height: int
    width: int  # width of ONE view

    @property
    def canvas_width(self) -> int:
        return 2 * self.width


def view1_to_canvas(x):
    x = torch.as_tensor(x)
    return torch.stack([x[..., 0] / 2, x[..., 1]], dim=-1)


def view2_to_canvas(x):
    x = torch.as_tensor(x)
    return torch.stack([0.5 + x[..., 0] / 2, x[..., 1]], dim=-1)


def canvas_to_view1(c):
    c = torch.as_tensor(c)
    return torch.stack([2 * c[..., 0], c[..., 1]], dim=-1)


def canvas_to_view2(c):
    c = torch.as_tensor(c)
    return torch.stack([2 * (c[..., 0] - 0.5), c[..., 1]], dim=-1)


def build_context(F1: FeatureMap, F2: FeatureMap) -> ConcatContext:
    """Side-by-side concatenation of the two maps plus fixed canvas positions."""
    if F1.data.shape != F2.data.shape:
        raise InvalidInputError(f"feature maps differ in shape: {tuple(F1.data.shape)} vs {tuple(F2.data.shape)}")
    H, W, C = F1.data.shape
    canvas = concat([F1.data, F2.data], dim=1)
    pos = positional_encoding(grid_coords(H, 2 * W, dtype=canvas.dtype), C)
    return ConcatContext(tokens=canvas.reshape(H * 2 * W, C) + pos, height=H, width=W)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm_q = LayerNorm(dim)
        self.norm_ctx = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim)
        self.fc2 = Linear(mlp_ratio * dim, dim)

    def forward(self, q, ctx):
        q = q + self.attn(self.norm_q(q), self.norm_ctx(ctx))
        return q + self.fc2(gelu(self.fc1(self.norm2(q))))


class CorrespondenceDecoder(nn.Module):
    """Queries attend to the concatenated context; a fully connected head and a
    logistic squash give the predicted canvas point. Queries never interact."""

    def __init__(self, config: Optional[DecoderConfig] = None, seed: Optional[int] = 0):
        super().__init__()
        self.config = config = config or DecoderConfig()
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.query_proj = Linear(config.query_pos_dim, config.dim) if config.query_pos_dim != config.dim else None
            self.layers = nn.ModuleList(
                DecoderLayer(config.dim, config.heads, config.mlp_ratio) for _ in range(config.layers)
            )
            self.norm = LayerNorm(config.dim)
            self.fc = Linear(config.dim, 2)

    def forward(self, queries: torch.Tensor, ctx: ConcatContext) -> torch.Tensor:
        """``queries`` (Q, 2) canvas coordinates -> (Q, 2) canvas predictions."""
        queries = torch.as_tensor(queries)
        if queries.ndim != 2 or queries.shape[-1] != 2:
            raise InvalidQueryError(f"queries must be (Q, 2), got {tuple(queries.shape)}")
        if torch.any((queries < 0) | (queries > 1)) or not torch.isfinite(queries).all():
            raise InvalidQueryError("queries must lie in [0, 1]^2")
        if ctx.tokens.shape[-1] != self.config.dim:
            raise InvalidInputError(f"context dim {ctx.tokens.shape[-1]} != decoder dim {self.config.dim}")
        dtype = ctx.tokens.dtype
        q = positional_encoding(queries.to(dtype), self.config.query_pos_dim)
        if self.query_proj is not None:
            q = self.query_proj(q)
        q = q[None]
        c = ctx.tokens[None]
        for layer in self.layers:
            q = layer(q, c)
        return torch.sigmoid(self.fc(self.norm(q)))[0]


Predictor = Callable[[torch.Tensor, ConcatContext], torch.Tensor]


def predict_correspondence(model: Predictor, x, ctx: ConcatContext) -> torch.Tensor:
    """Predict view-2 canvas points for view-1 normalized query points ``x``."""
    x = torch.as_tensor(x, dtype=ctx.tokens.dtype)
    single = x.ndim == 1
    x = x.reshape(-1, 2)
    if torch.any((x < 0) | (x > 1)):
        raise InvalidQueryError("query points must lie in [0, 1]^2")
    out = model(view1_to_canvas(x), ctx)
    return out[0] if single else out


def _pair_tensors(pairs: CorrespondenceSet, dtype):
    if len(pairs) == 0:
        raise UndefinedLossError("no correspondence pairs")
    x = view1_to_canvas(torch.from_numpy(pairs.x).to(dtype))
    gt = view2_to_canvas(torch.from_numpy(pairs.x_gt).to(dtype))
    return x, gt


def loss_m(model: Predictor, pairs: CorrespondenceSet, F1: FeatureMap, F2: FeatureMap,
           ctx: Optional[ConcatContext] = None) -> torch.Tensor:
    """Mean over pairs of forward correspondence error plus cycle error, in canvas units.

    The cycle pass feeds the prediction back through the same context, in the
    same (F1, F2) order.
    """
    ctx = ctx or build_context(F1, F2)
    x, gt = _pair_tensors(pairs, ctx.tokens.dtype)
    pred = model(x, ctx)
    back = model(pred, ctx)
    per_pair = ((gt - pred) ** 2).sum(-1) + ((x - back) ** 2).sum(-1)
    return per_pair.mean()


@torch.no_grad()
def eval_correspondence_error(model: Predictor, pairs: CorrespondenceSet, F1: FeatureMap, F2: FeatureMap,
                              ctx: Optional[ConcatContext] = None) -> float:
    """Mean Euclidean error of forward predictions, in view-2 pixels."""
    ctx = ctx or build_context(F1, F2)
    x, _ = _pair_tensors(pairs, ctx.tokens.dtype)
    pred = canvas_to_view2(model(x, ctx)).double().numpy()
    H, W = F2.shape
    err = np.hypot((pred[:, 0] - pairs.x_gt[:, 0]) * W, (pred[:, 1] - pairs.x_gt[:, 1]) * H)
    return float(err.mean())


def total_loss(l2d, lm, lam: float = DEFAULT_LAMBDA):
    return l2d + lam * lm
