"""Residual U-Net over a densified voxel grid, plus the point-feature composition.

The grid's bounding box is densified (empty cells zero) and every activation is
re-masked to the occupied set at its resolution, so convolutions and batch-norm
statistics behave like their sparse counterparts on active sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cloud import DEFAULT_KNN_K, DEFAULT_VOXEL_SIZE, ColoredPointCloud, FeatureVolume, VoxelGrid, knn_interpolate, voxelize
from .errors import GridTooLargeError, InvalidInputError
from .nn import Conv3d, ConvTranspose3d, MaskedBatchNorm, concat

ENCODER_HALF = "encoder"
DECODER_HALF = "decoder"


@dataclass
class EncoderConfig:
    channels_per_stage: tuple[int, ...] = (16, 32, 48, 64)
    out_channels: int = 96
    num_down_stages: int = 4
    num_up_stages: int = 4
    in_channels: int = 6
    max_grid: int = 64

    def __post_init__(self):
        self.channels_per_stage = tuple(int(c) for c in self.channels_per_stage)
        if self.num_down_stages != self.num_up_stages:
            raise InvalidInputError("down and up stage counts must match")
        if len(self.channels_per_stage) != self.num_down_stages:
            raise InvalidInputError("need one channel width per down stage")
        if self.out_channels < 1:
            raise InvalidInputError("out_channels must be >= 1")

    def skip_channels(self, k: int) -> int:
        """Channels of down-stage k's output; stage 0 is the stem."""
        return self.channels_per_stage[max(k - 1, 0)]


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = Conv3d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = MaskedBatchNorm(cout)
        self.conv2 = Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = MaskedBatchNorm(cout)
        if cin != cout:
            self.proj = Conv3d(cin, cout, 1, bias=False)
            self.proj_bn = MaskedBatchNorm(cout)
        else:
            self.proj = None

    def forward(self, x, mask):
        y = F.relu(self.bn1(self.conv1(x), mask))
        y = self.bn2(self.conv2(y), mask)
        short = x if self.proj is None else self.proj_bn(self.proj(x), mask)
        return F.relu(y + short) * mask


class DownStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = Conv3d(cin, cout, 2, stride=2, bias=False)
        self.bn = MaskedBatchNorm(cout)
        self.block = ResBlock(cout, cout)

    def forward(self, x, mask):
        return self.block(F.relu(self.bn(self.down(x), mask)), mask)


class UpStage(nn.Module):
    def __init__(self, cin: int, cskip: int):
        super().__init__()
        self.up = ConvTranspose3d(cin, cskip, 2, stride=2, bias=False)
        self.bn = MaskedBatchNorm(cskip)
        self.block = ResBlock(2 * cskip, cskip)

    def forward(self, x, skip, mask):
        y = F.relu(self.bn(self.up(x), mask))
        return self.block(concat([y, skip], dim=1), mask)


class Encoder3dModel(nn.Module):
    def __init__(self, config: Optional[EncoderConfig] = None, seed: Optional[int] = 0):
        super().__init__()
        self.config = config = config or EncoderConfig()
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            ch = config.channels_per_stage
            self.stem = Conv3d(config.in_channels, ch[0], 3, padding=1, bias=False)
            self.stem_bn = MaskedBatchNorm(ch[0])
            self.down = nn.ModuleList(
                DownStage(config.skip_channels(s), config.skip_channels(s + 1))
                for s in range(config.num_down_stages)
            )
            # up-stage s (1-based) upsamples and concatenates down-stage (n - s)
            n = config.num_down_stages
            self.up = nn.ModuleList(
                UpStage(config.skip_channels(n - s + 1), config.skip_channels(n - s))
                for s in range(1, config.num_up_stages + 1)
            )
            self.head = Conv3d(ch[0], config.out_channels, 1, bias=True)
        self.zero_skips = False

    def parameter_half(self, name: str) -> str:
        return ENCODER_HALF if name.startswith(("stem", "down")) else DECODER_HALF

    def forward(self, x: torch.Tensor, mask: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
        """Dense input (1, 6, D, H, W) and occupancy mask -> (M', C) features at ``index``.

        The 1x1x1 head only runs on the gathered occupied cells.
        """
        masks = [mask]
        for _ in self.down:
            masks.append(F.max_pool3d(masks[-1], 2))
        skips = [F.relu(self.stem_bn(self.stem(x), mask)) * mask]
        for s, stage in enumerate(self.down, start=1):
            skips.append(stage(skips[-1], masks[s]))
        y = skips[-1]
        n = len(self.down)
        for s, stage in enumerate(self.up, start=1):
            skip = skips[n - s]
            if self.zero_skips:
                skip = torch.zeros_like(skip)
            y = stage(y, skip, masks[n - s])
        gathered = y[0, :, index[:, 0], index[:, 1], index[:, 2]].T
        return F.linear(gathered, self.head.weight.flatten(1), self.head.bias)


def expected_parameter_count(config: EncoderConfig) -> int:
    """Closed-form parameter count for :class:`Encoder3dModel`."""

    def conv(cin, cout, k, bias=False):
        return cin * cout * k ** 3 + (cout if bias else 0)

    def bn(c):
        return 2 * c

    def res(cin, cout):
        total = conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)
        if cin != cout:
            total += conv(cin, cout, 1) + bn(cout)
        return total

    c = config.skip_channels
    n = config.num_down_stages
    total = conv(config.in_channels, c(0), 3) + bn(c(0))
    for s in range(n):
        total += conv(c(s), c(s + 1), 2) + bn(c(s + 1)) + res(c(s + 1), c(s + 1))
    for s in range(1, n + 1):
        cin, cskip = c(n - s + 1), c(n - s)
        total += conv(cin, cskip, 2) + bn(cskip) + res(2 * cskip, cskip)
    total += conv(c(0), config.out_channels, 1, bias=True)
    return total


def voxel_inputs(grid: VoxelGrid) -> np.ndarray:
    """Per-voxel network input: mean in-cell offset centered on zero, then mean RGB."""
    return np.concatenate([grid.offsets - 0.5, grid.features[:, 3:]], axis=1)


def densify(grid: VoxelGrid, multiple: int, max_grid: int, dtype=torch.float32):
    extent = grid.indices.max(axis=0) + 1
    if np.any(extent > max_grid):
        raise GridTooLargeError(
            f"grid bounding box {tuple(int(e) for e in extent)} exceeds {max_grid}^3 cells"
        )
    dims = tuple(int(-(-e // multiple) * multiple) for e in extent)
    idx = torch.from_numpy(grid.indices)
    feats = torch.from_numpy(voxel_inputs(grid)).to(dtype)
    x = torch.zeros((1, feats.shape[1]) + dims, dtype=dtype)
    x[0, :, idx[:, 0], idx[:, 1], idx[:, 2]] = feats.T
    mask = torch.zeros((1, 1) + dims, dtype=dtype)
    mask[0, 0, idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return x, mask


def encoder_forward(model: Encoder3dModel, grid: VoxelGrid) -> torch.Tensor:
    """Per-voxel features (M', C), rows in the grid's cell order."""
    if len(grid) == 0:
        raise InvalidInputError("empty voxel grid")
    dtype = next(model.parameters()).dtype
    cfg = model.config
    x, mask = densify(grid, 2 ** cfg.num_down_stages, cfg.max_grid, dtype)
    return model(x, mask, torch.from_numpy(grid.indices))


def encode_points(
    model: Encoder3dModel,
    cloud: ColoredPointCloud,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    k: int = DEFAULT_KNN_K,
) -> FeatureVolume:
    grid = voxelize(cloud, voxel_size)
    return knn_interpolate(encoder_forward(model, grid), grid, cloud, k)
