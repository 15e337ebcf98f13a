"""Held-out correspondence error and per-point feature export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..cloud import build_point_cloud
from ..consistency import build_context, eval_correspondence_error
from ..encoder3d import encode_points
from ..errors import InvalidInputError, NoPairError
from ..geometry import RgbdFrame
from .sampling import overlap_matrix, sample_pair_retrying
from .training import MVNetModels, PairSample, TrainConfig, pair_features, prepare_pair


@dataclass
class CorrespondenceReport:
    pair_errors: list[float] = field(default_factory=list)
    pair_ids: list[tuple[str, str]] = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        if not self.pair_errors:
            raise InvalidInputError("no pairs were evaluated")
        return float(np.mean(self.pair_errors))

    def to_dict(self) -> dict:
        return {
            "mean_pixel_error": self.mean_error,
            "pairs": [{"first": a, "second": b, "pixel_error": e}
                      for (a, b), e in zip(self.pair_ids, self.pair_errors)],
        }


def held_out_pairs(scene: Sequence[RgbdFrame], config: TrainConfig, seed: int, count: int = 4) -> list[PairSample]:
    """``count`` unmasked pairs drawn with the training sampler, with all stride-lattice correspondences."""
    rng = np.random.default_rng(seed)
    overlaps = overlap_matrix(scene, config.depth_tol)
    full = TrainConfig.from_dict({**config.to_dict(), "queries_per_pair": 1 << 30})
    samples = []
    for _ in range(count):
        f1, f2 = sample_pair_retrying(scene, config.overlap_range, config.candidate_views, rng, overlaps)
        s = prepare_pair(f1, f2, full, rng, masked=False)
        if len(s.pairs):
            samples.append(s)
    if not samples:
        raise NoPairError("held-out scene produced no pairs with correspondences")
    return samples


@torch.no_grad()
def correspondence_error(models: MVNetModels, samples: Sequence[PairSample], config: TrainConfig) -> CorrespondenceReport:
    models.eval()
    report = CorrespondenceReport()
    for s in samples:
        F1, F2 = pair_features(models, s, config)
        report.pair_errors.append(eval_correspondence_error(models.decoder, s.pairs, F1, F2, build_context(F1, F2)))
        report.pair_ids.append((s.f1.frame_id, s.f2.frame_id))
    return report


@torch.no_grad()
def point_features(encoder, frames: Sequence[RgbdFrame], config: TrainConfig):
    """Frozen per-point encoder features for a one- or two-frame cloud.

    Returns (features (M, C) float64, cloud).
    """
    encoder.eval()
    cloud = build_point_cloud(frames[0], frames[1] if len(frames) > 1 else None)
    volume = encode_points(encoder, cloud, config.voxel_size, config.knn_k)
    return volume.features.double().numpy(), cloud


def export_scene_features(path, encoder, scene: Sequence[RgbdFrame], config: TrainConfig) -> None:
    """Dump per-frame point arrays to an ``.npz`` archive, keyed ``{frame_id}/{field}``."""
    arrays = {}
    for f in scene:
        feats, cloud = point_features(encoder, [f], config)
        arrays[f"{f.frame_id}/features"] = feats.astype(np.float32)
        arrays[f"{f.frame_id}/positions"] = cloud.positions
        arrays[f"{f.frame_id}/colors"] = cloud.colors
        arrays[f"{f.frame_id}/pixels"] = cloud.provenance[:, 1:]
        if cloud.labels is not None:
            arrays[f"{f.frame_id}/labels"] = cloud.labels
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
