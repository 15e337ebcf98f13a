"""Hierarchical feature distillation from a frozen 2D network.

The teacher sees the RGB image; the student sees a projected C-channel feature
map. Both are the same ViT-lite (patch tokens only, fixed sinusoidal positions)
except for the patch-embedding input width, so their per-block outputs can be
compared entry by entry.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .cloud import FeatureMap
from .errors import InvalidGeometryError, InvalidInputError, ShapeMismatchError
from .nn import Conv2d, LayerNorm, Linear, MultiHeadAttention, gelu, grid_coords, positional_encoding

DEFAULT_START_LAYER = 3
ARCHIVE_MAGIC = b"MVTA"
ARCHIVE_VERSION = 1


@dataclass
class Vit2dConfig:
    num_blocks: int = 12
    heads: int = 6
    hidden_dim: int = 96
    patch_size: int = 8
    in_channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise InvalidInputError(f"hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.hidden_dim % 4:
            raise InvalidInputError("hidden_dim must be a multiple of 4 for the positional encoding")


@dataclass(eq=False)
class BlockActivations:
    blocks: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.blocks)

    def detach(self) -> "BlockActivations":
        return BlockActivations([b.detach() for b in self.blocks])


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim)
        self.fc2 = Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class VitLite(nn.Module):
    """Patch embedding followed by ``num_blocks`` pre-norm transformer blocks."""

    def __init__(self, config: Vit2dConfig, seed: Optional[int] = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            p = config.patch_size
            self.patch_embed = Conv2d(config.in_channels, config.hidden_dim, p, stride=p)
            nn.init.trunc_normal_(self.patch_embed.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(self.patch_embed.bias)
            self.blocks = nn.ModuleList(
                TransformerBlock(config.hidden_dim, config.heads, config.mlp_ratio)
                for _ in range(config.num_blocks)
            )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """``image`` is (B, C, H, W); returns one (B, tokens, dim) tensor per block."""
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise InvalidInputError(
                f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(image.shape)}"
            )
        H, W = image.shape[-2:]
        p = cfg.patch_size
        if H % p or W % p:
            raise InvalidGeometryError(f"patch size {p} does not divide {H}x{W}")
        x = self.patch_embed(image).flatten(2).transpose(1, 2)
        # patch centers, normalized
        coords = grid_coords(H // p, W // p, dtype=x.dtype) + 0.5 * torch.tensor(
            [1.0 / (W // p), 1.0 / (H // p)], dtype=x.dtype)
        x = x + positional_encoding(coords, cfg.hidden_dim)
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out


def lecun_init_(module: nn.Module, seed: int) -> nn.Module:
    """Redraw every linear/conv weight from a 2-sigma truncated normal with std 1/sqrt(fan_in); zero biases."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                fan_in = m.weight[0].numel()
                std = fan_in ** -0.5
                w = torch.randn(m.weight.shape, generator=gen, dtype=torch.float64)
                # resample out-of-range draws until none remain
                bad = w.abs() > 2
                while bad.any():
                    w[bad] = torch.randn(int(bad.sum()), generator=gen, dtype=torch.float64)
                    bad = w.abs() > 2
                m.weight.copy_(w * std)
                if m.bias is not None:
                    m.bias.zero_()
    return module


class SeededTeacher(nn.Module):
    """Frozen, randomly initialized ViT-lite standing in for a pre-trained model.

    Weights use fan-in scaling rather than the 0.02 training init: at 0.02 the
    patch embedding is swamped by the positional encoding and every block is
    nearly the identity, so the targets would barely depend on the image.
    """

    def __init__(self, config: Optional[Vit2dConfig] = None, seed: int = 1234):
        super().__init__()
        config = config or Vit2dConfig()
        if config.in_channels != 3:
            raise InvalidInputError("the teacher consumes RGB images")
        self.seed = seed
        self.net = lecun_init_(VitLite(config, seed=seed), seed)
        self.net.requires_grad_(False)
        self.eval()

    @property
    def config(self) -> Vit2dConfig:
        return self.net.config

    def train(self, mode: bool = True):
        # frozen: always stays in eval mode
        return super().train(False)


def _image_tensor(image) -> torch.Tensor:
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise InvalidInputError(f"image must be H x W x 3, got {tuple(img.shape)}")
    if img.min() < 0 or img.max() > 1:
        raise InvalidInputError("image values must lie in [0, 1]")
    return img.permute(2, 0, 1)[None]


def teacher_forward(teacher, image, frame_id: Optional[str] = None) -> BlockActivations:
    """Per-block teacher tokens for an H x W x 3 image. Never tracks gradients."""
    if isinstance(teacher, ImportedTeacher):
        return teacher.activations(frame_id)
    with torch.no_grad():
        dtype = next(teacher.parameters()).dtype
        blocks = teacher.net(_image_tensor(image).to(dtype))
    return BlockActivations([b[0] for b in blocks])


def student_forward(student: VitLite, fmap: Union[FeatureMap, torch.Tensor]) -> BlockActivations:
    data = fmap.data if isinstance(fmap, FeatureMap) else fmap
    if data.ndim != 3 or data.shape[-1] != student.config.in_channels:
        raise InvalidInputError(
            f"student expects an H x W x {student.config.in_channels} feature map, got {tuple(data.shape)}"
        )
    blocks = student(data.permute(2, 0, 1)[None])
    return BlockActivations([b[0] for b in blocks])


def loss_2d(student_acts: BlockActivations, teacher_acts: BlockActivations, start_layer: int = DEFAULT_START_LAYER):
    """Sum over blocks ``start_layer..N`` (1-based) of squared entrywise differences.

    Teacher activations are treated as constants.
    """
    n = len(student_acts)
    if len(teacher_acts) != n:
        raise InvalidInputError(f"{n} student blocks vs {len(teacher_acts)} teacher blocks")
    if not 1 <= start_layer <= n:
        raise InvalidInputError(f"start layer {start_layer} outside [1, {n}]")
    total = 0.0
    for s, t in zip(student_acts.blocks[start_layer - 1:], teacher_acts.blocks[start_layer - 1:]):
        if s.shape != t.shape:
            raise InvalidInputError(f"block shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}")
        total = total + ((t.detach() - s) ** 2).sum()
    return total


# -- activation archives ------------------------------------------------------

def write_activation_archive(path, acts: BlockActivations) -> None:
    blocks = [np.asarray(b.detach().cpu(), dtype="<f4") for b in acts.blocks]
    tokens, dim = blocks[0].shape
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<IIII", ARCHIVE_VERSION, len(blocks), tokens, dim))
        for b in blocks:
            if b.shape != (tokens, dim):
                raise ShapeMismatchError("all blocks in an archive must share one shape")
            fh.write(np.ascontiguousarray(b).tobytes())


def read_activation_archive(path) -> BlockActivations:
    raw = Path(path).read_bytes()
    if raw[:4] != ARCHIVE_MAGIC:
        raise InvalidInputError(f"{path}: not an activation archive")
    if len(raw) < 20:
        raise InvalidInputError(f"{path}: truncated header")
    version, n, tokens, dim = struct.unpack("<IIII", raw[4:20])
    if version != ARCHIVE_VERSION:
        raise InvalidInputError(f"{path}: archive version {version}, expected {ARCHIVE_VERSION}")
    need = 20 + 4 * n * tokens * dim
    if len(raw) != need:
        raise InvalidInputError(f"{path}: expected {need} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=20).reshape(n, tokens, dim)
    return BlockActivations([torch.from_numpy(arr[i].astype(np.float32)) for i in range(n)])


def write_archive_set(directory, activations: dict[str, BlockActivations]) -> Path:
    """One archive per frame plus a ``manifest.json`` mapping frame ids to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i, (frame_id, acts) in enumerate(sorted(activations.items())):
        name = f"acts_{i:05d}.mvta"
        write_activation_archive(directory / name, acts)
        manifest[frame_id] = name
    path = directory / "manifest.json"
    path.write_text(json.dumps({"archives": manifest}, indent=1))
    return path


class ImportedTeacher:
    """Teacher backed by precomputed activations, looked up by frame id."""

    def __init__(self, directory, num_blocks: int, tokens: int, hidden_dim: int):
        self.directory = Path(directory)
        self.expected = (num_blocks, tokens, hidden_dim)
        manifest = json.loads((self.directory / "manifest.json").read_text())
        self.archives: dict[str, str] = manifest["archives"]

    def activations(self, frame_id: Optional[str]) -> BlockActivations:
        if frame_id not in self.archives:
            raise InvalidInputError(f"no imported activations for frame {frame_id!r}")
        acts = read_activation_archive(self.directory / self.archives[frame_id])
        got = (len(acts), *acts.blocks[0].shape)
        if got != self.expected:
            raise ShapeMismatchError(f"archive for {frame_id!r} has (N, tokens, dim) = {got}, expected {self.expected}")
        return acts

    def parameters(self):
        return iter(())


def make_teacher(source: str = "seeded-synthetic", config: Optional[Vit2dConfig] = None, seed: int = 1234,
                 archive_dir=None, tokens: Optional[int] = None):
    config = config or Vit2dConfig()
    if source == "seeded-synthetic":
        return SeededTeacher(config, seed=seed)
    if source == "imported":
        if archive_dir is None or tokens is None:
            raise InvalidInputError("an imported teacher needs archive_dir and tokens")
        return ImportedTeacher(archive_dir, config.num_blocks, tokens, config.hidden_dim)
    raise InvalidInputError(f"unknown teacher source {source!r}")


def student_config(teacher_config: Vit2dConfig, channels: int) -> Vit2dConfig:
    """Teacher architecture with the patch embedding widened to ``channels`` inputs."""
    return Vit2dConfig(
        num_blocks=teacher_config.num_blocks,
        heads=teacher_config.heads,
        hidden_dim=teacher_config.hidden_dim,
        patch_size=teacher_config.patch_size,
        in_channels=channels,
        mlp_ratio=teacher_config.mlp_ratio,
    )


def block_shapes(acts: BlockActivations) -> Sequence[tuple[int, ...]]:
    return [tuple(b.shape) for b in acts.blocks]
