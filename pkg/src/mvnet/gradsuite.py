"""Named gradient checks for every differentiable layer and the three composite networks."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from . import nn as mnn
from .cloud import ColoredPointCloud, FeatureMap, FeatureVolume, knn_interpolate, project_features, voxelize
from .consistency import ConcatContext, CorrespondenceDecoder, DecoderConfig, build_context, loss_m
from .encoder3d import EncoderConfig, Encoder3dModel
from .errors import InvalidInputError
from .geometry import CameraExtrinsics, CameraIntrinsics, CorrespondenceSet, RgbdFrame
from .nn.gradcheck import GradCheckReport, grad_check
from .transfer import BlockActivations, Vit2dConfig, VitLite, loss_2d

TOLERANCE = 1e-4


def _layer_checks() -> dict[str, Callable[[], GradCheckReport]]:
    mask3 = (torch.rand((1, 1, 4, 4, 4), generator=torch.Generator().manual_seed(3)) > 0.4).double()
    return {
        "linear": lambda: grad_check(mnn.Linear(5, 3), [(4, 5)]),
        "conv2d": lambda: grad_check(mnn.Conv2d(2, 3, 3, padding=1), [(1, 2, 5, 5)]),
        "conv3d": lambda: grad_check(mnn.Conv3d(2, 3, 3, padding=1), [(1, 2, 4, 4, 4)]),
        "conv3d_strided": lambda: grad_check(mnn.Conv3d(2, 3, 2, stride=2), [(1, 2, 4, 4, 4)]),
        "conv_transpose3d": lambda: grad_check(mnn.ConvTranspose3d(3, 2, 2, stride=2), [(1, 3, 2, 2, 2)]),
        "layer_norm": lambda: grad_check(mnn.LayerNorm(6), [(3, 6)]),
        "masked_batch_norm": lambda: grad_check(
            mnn.MaskedBatchNorm(3), [(1, 3, 4, 4, 4)], fn=lambda m, x: m(x, mask3)),
        "relu": lambda: grad_check(None, [(5, 7)], fn=lambda m, x: mnn.relu(x)),
        "gelu": lambda: grad_check(None, [(5, 7)], fn=lambda m, x: mnn.gelu(x)),
        "softmax": lambda: grad_check(None, [(4, 6)], fn=lambda m, x: mnn.softmax(x, -1)),
        "concat": lambda: grad_check(None, [(2, 3), (2, 4)], fn=lambda m, a, b: mnn.concat([a, b], 1)),
        "mse": lambda: grad_check(None, [(4, 3), (4, 3)], fn=lambda m, a, b: mnn.mse(a, b)),
        "self_attention": lambda: grad_check(mnn.MultiHeadAttention(8, 2), [(1, 5, 8)]),
        "cross_attention": lambda: grad_check(
            mnn.MultiHeadAttention(8, 2, context_dim=6), [(1, 3, 8), (1, 7, 6)], fn=lambda m, q, c: m(q, c)),
        "positional_encoding": lambda: grad_check(
            None, [torch.rand(5, 2, generator=torch.Generator().manual_seed(1))],
            fn=lambda m, c: mnn.positional_encoding(c, 8, max_freq=4.0)),
        "loss_2d": _loss_2d_check,
        "knn_interpolate": _knn_check,
        "project_features": _projection_check,
        "loss_m": _loss_m_check,
    }


def _loss_2d_check() -> GradCheckReport:
    # teacher activations are constants: the loss detaches them
    gen = torch.Generator().manual_seed(5)
    teacher = BlockActivations([torch.randn((1, 4, 3), generator=gen, dtype=torch.float64) for _ in range(5)])
    return grad_check(None, [(1, 4, 3)] * 5, fn=lambda m, *a: loss_2d(BlockActivations(list(a)), teacher, 3))


def _spread(module: torch.nn.Module, std: float = 0.5, seed: int = 0) -> torch.nn.Module:
    """Redraw every parameter from N(0, std^2).

    At the 0.02-scale init, attention is almost uniform and some gradients sit
    near round-off of the loss value, which makes finite differences meaningless.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)
    return module


def _tiny_frame(seed: int, H: int = 6, W: int = 6) -> RgbdFrame:
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(fx=5.0, fy=5.0, cx=(W - 1) / 2, cy=(H - 1) / 2, width=W, height=H)
    return RgbdFrame(rng.uniform(0, 1, (H, W, 3)), rng.uniform(1, 2, (H, W)), np.ones((H, W), bool), intr,
                     CameraExtrinsics(np.eye(3), np.zeros(3)), f"g{seed}")


def _knn_check() -> GradCheckReport:
    rng = np.random.default_rng(0)
    cloud = ColoredPointCloud(rng.uniform(0, 0.3, (20, 3)), rng.uniform(0, 1, (20, 3)), np.zeros((20, 3)))
    grid = voxelize(cloud, 0.1)
    return grad_check(None, [(len(grid), 4)], fn=lambda m, f: knn_interpolate(f, grid, cloud, 3).features)


def _projection_check() -> GradCheckReport:
    from .cloud import build_point_cloud

    f = _tiny_frame(0)
    cloud = build_point_cloud(f)
    return grad_check(None, [(len(cloud), 3)],
                      fn=lambda m, x: project_features(FeatureVolume(x, cloud), f).data)


def _pairs(n: int = 6, seed: int = 0) -> CorrespondenceSet:
    rng = np.random.default_rng(seed)
    return CorrespondenceSet(rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.1, 0.9, (n, 2)), ("a", "b"))


def _loss_m_check() -> GradCheckReport:
    cfg = DecoderConfig(layers=1, heads=2, dim=8, query_pos_dim=8)
    pairs = _pairs()

    def fn(m, a, b):
        F1 = FeatureMap(a, np.ones((8, 8), bool), "a")
        F2 = FeatureMap(b, np.ones((8, 8), bool), "b")
        return loss_m(m, pairs, F1, F2)

    return grad_check(_spread(CorrespondenceDecoder(cfg, seed=0)), [(8, 8, 8), (8, 8, 8)], fn=fn)


def _composite_checks() -> dict[str, Callable[[], GradCheckReport]]:
    return {"encoder3d": _encoder_check, "student_vit": _student_check, "consistency_decoder": _decoder_check}


def _encoder_check() -> GradCheckReport:
    cfg = EncoderConfig(channels_per_stage=(4, 6), out_channels=5, num_down_stages=2, num_up_stages=2)
    gen = torch.Generator().manual_seed(7)
    mask = torch.ones((1, 1, 4, 4, 4), dtype=torch.float64)
    mask[0, 0, 3, 3, :2] = 0.0
    index = torch.nonzero(mask[0, 0]).long()
    x = torch.randn((1, 6, 4, 4, 4), generator=gen, dtype=torch.float64) * mask
    model = Encoder3dModel(cfg, seed=0)
    model.train()
    # the coarsest level holds one active site; batch statistics there are degenerate,
    # so the check runs with running statistics at that level only
    model.down[-1].eval()
    model.up[0].bn.eval()
    return grad_check(model, [x], fn=lambda m, t: m(t, mask, index), check_inputs=True)


def _student_check() -> GradCheckReport:
    cfg = Vit2dConfig(num_blocks=2, heads=2, hidden_dim=8, patch_size=4, in_channels=5)
    return grad_check(VitLite(cfg, seed=0), [(1, 5, 16, 16)])


def _decoder_check() -> GradCheckReport:
    cfg = DecoderConfig(layers=2, heads=2, dim=8, query_pos_dim=8)
    gen = torch.Generator().manual_seed(2)
    queries = 0.1 + 0.8 * torch.rand((5, 2), generator=gen, dtype=torch.float64)

    def fn(m, q, tokens):
        return m(q, ConcatContext(tokens=tokens, height=8, width=8))

    return grad_check(_spread(CorrespondenceDecoder(cfg, seed=0)), [queries, (8 * 16, 8)], fn=fn)


def available_checks() -> dict[str, Callable[[], GradCheckReport]]:
    return {**_layer_checks(), **_composite_checks()}


def run_checks(names: Optional[list[str]] = None) -> dict[str, GradCheckReport]:
    checks = available_checks()
    names = list(checks) if not names else names
    unknown = [n for n in names if n not in checks]
    if unknown:
        raise InvalidInputError(f"unknown gradient check(s) {unknown}; choose from {sorted(checks)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        return {n: checks[n]() for n in names}
