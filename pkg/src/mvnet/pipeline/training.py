"""Pre-training: pair preparation, the combined objective and the optimizer loop."""

from __future__ import annotations

import dataclasses
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from ..cloud import (
    DEFAULT_KNN_K,
    DEFAULT_VOXEL_SIZE,
    FeatureMap,
    PatchMask,
    build_point_cloud,
    project_features,
    sample_patch_mask,
)
from ..consistency import DEFAULT_LAMBDA, CorrespondenceDecoder, DecoderConfig, build_context, loss_m
from ..encoder3d import EncoderConfig, Encoder3dModel, encode_points
from ..errors import InvalidInputError, TrainStepError
from ..geometry import DEFAULT_DEPTH_TOL, CorrespondenceSet, RgbdFrame, ground_truth_correspondences
from ..nn import AdamW, assert_finite
from ..nn.optim import DEFAULT_LR, DEFAULT_WEIGHT_DECAY
from ..transfer import (
    DEFAULT_START_LAYER,
    BlockActivations,
    Vit2dConfig,
    VitLite,
    loss_2d,
    make_teacher,
    student_config,
    student_forward,
    teacher_forward,
)
from .sampling import DEFAULT_CANDIDATE_VIEWS, DEFAULT_OVERLAP_RANGE, overlap_matrix, sample_pair_retrying

log = logging.getLogger(__name__)

THREADS_ENV = "MVNET_THREADS"


@dataclass
class TrainConfig:
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 1
    epochs: int = 1
    max_steps: Optional[int] = None
    lam: float = DEFAULT_LAMBDA
    mask_ratio: float = 0.30
    mask_patch_size: int = 4
    overlap_range: tuple[float, float] = DEFAULT_OVERLAP_RANGE
    candidate_views: int = DEFAULT_CANDIDATE_VIEWS
    start_layer: int = DEFAULT_START_LAYER
    voxel_size: float = DEFAULT_VOXEL_SIZE
    channels: int = 96
    knn_k: int = DEFAULT_KNN_K
    seed: int = 0
    depth_tol: float = DEFAULT_DEPTH_TOL
    corr_stride: int = 4
    queries_per_pair: int = 64
    loss_2d_reduction: str = "sum"
    encoder_channels: tuple[int, ...] = (16, 32, 48, 64)
    max_grid: int = 64
    vit_blocks: int = 12
    vit_heads: int = 6
    vit_patch: int = 8
    decoder_layers: int = 3
    decoder_heads: int = 4
    teacher_source: str = "seeded-synthetic"
    teacher_seed: int = 1234
    teacher_archive: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.overlap_range = tuple(self.overlap_range)
        self.encoder_channels = tuple(self.encoder_channels)
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise InvalidInputError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        lo, hi = self.overlap_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidInputError(f"overlap_range must satisfy 0 <= low <= high <= 1, got {self.overlap_range}")
        if self.lam < 0:
            raise InvalidInputError(f"lambda must be >= 0, got {self.lam}")
        if self.loss_2d_reduction not in ("sum", "mean"):
            raise InvalidInputError("loss_2d_reduction must be 'sum' or 'mean'")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(channels_per_stage=self.encoder_channels, out_channels=self.channels,
                             max_grid=self.max_grid)

    def teacher_config(self) -> Vit2dConfig:
        return Vit2dConfig(num_blocks=self.vit_blocks, heads=self.vit_heads, hidden_dim=self.channels,
                           patch_size=self.vit_patch, in_channels=3)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(layers=self.decoder_layers, heads=self.decoder_heads, dim=self.channels,
                             query_pos_dim=self.channels)


@dataclass(eq=False)
class MVNetModels:
    encoder: Encoder3dModel
    student: VitLite
    decoder: CorrespondenceDecoder
    teacher: object
    _teacher_cache: dict = field(default_factory=dict, repr=False)

    def trainable(self) -> list[tuple[str, torch.nn.Parameter]]:
        named = []
        for prefix, module in (("encoder3d", self.encoder), ("student", self.student), ("decoder", self.decoder)):
            named += [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]
        return named

    def train(self, mode: bool = True) -> "MVNetModels":
        self.encoder.train(mode)
        self.student.train(mode)
        self.decoder.train(mode)
        return self

    def eval(self) -> "MVNetModels":
        return self.train(False)

    def teacher_activations(self, frame: RgbdFrame) -> BlockActivations:
        acts = self._teacher_cache.get(frame.frame_id)
        if acts is None:
            acts = teacher_forward(self.teacher, frame.rgb, frame.frame_id)
            if frame.frame_id:
                self._teacher_cache[frame.frame_id] = acts
        return acts


def build_models(config: TrainConfig, tokens: Optional[int] = None) -> MVNetModels:
    """Fresh models; every initialization is derived from ``config.seed``."""
    tcfg = config.teacher_config()
    teacher = make_teacher(config.teacher_source, tcfg, seed=config.teacher_seed,
                           archive_dir=config.teacher_archive, tokens=tokens)
    return MVNetModels(
        encoder=Encoder3dModel(config.encoder_config(), seed=config.seed),
        student=VitLite(student_config(tcfg, config.channels), seed=config.seed + 1),
        decoder=CorrespondenceDecoder(config.decoder_config(), seed=config.seed + 2),
        teacher=teacher,
    )


@dataclass(eq=False)
class PairSample:
    f1: RgbdFrame
    f2: RgbdFrame
    mask1: Optional[PatchMask]
    mask2: Optional[PatchMask]
    pairs: CorrespondenceSet


@dataclass
class LossReport:
    l2d: float
    lm: float
    total: float


def configure_threads(deterministic: Optional[bool] = None) -> int:
    """Apply ``MVNET_THREADS``; 0 (or ``deterministic``) means one thread, deterministic kernels."""
    raw = os.environ.get(THREADS_ENV)
    threads = int(raw) if raw not in (None, "") else max(1, torch.get_num_threads())
    if deterministic:
        threads = 0
    torch.use_deterministic_algorithms(threads == 0)
    torch.set_num_threads(max(threads, 1))
    return threads


def prepare_pair(f1: RgbdFrame, f2: RgbdFrame, config: TrainConfig, rng: np.random.Generator,
                 masked: bool = True) -> PairSample:
    H, W = f1.shape
    masks = [None, None]
    if masked and config.mask_ratio > 0:
        masks = [sample_patch_mask(config.mask_ratio, config.mask_patch_size, H, W,
                                   int(rng.integers(2 ** 31))) for _ in range(2)]
    pairs = ground_truth_correspondences(f1, f2, config.corr_stride, config.depth_tol)
    if len(pairs) > config.queries_per_pair:
        pairs = pairs.subset(np.sort(rng.choice(len(pairs), config.queries_per_pair, replace=False)))
    return PairSample(f1, f2, masks[0], masks[1], pairs)


def pair_features(models: MVNetModels, sample: PairSample, config: TrainConfig) -> tuple[FeatureMap, FeatureMap]:
    cloud = build_point_cloud(sample.f1, sample.f2, sample.mask1, sample.mask2)
    volume = encode_points(models.encoder, cloud, config.voxel_size, config.knn_k)
    assert_finite(volume.features, "point feature volume")
    return project_features(volume, sample.f1), project_features(volume, sample.f2)


def pair_losses(models: MVNetModels, sample: PairSample, config: TrainConfig):
    """(L_2d, L_m) tensors for one pair."""
    F1, F2 = pair_features(models, sample, config)
    per_view = []
    for frame, fmap in ((sample.f1, F1), (sample.f2, F2)):
        acts = student_forward(models.student, fmap)
        per_view.append(loss_2d(acts, models.teacher_activations(frame), config.start_layer))
    l2d = sum(per_view)
    if config.loss_2d_reduction == "mean":
        l2d = l2d / len(per_view)
    if len(sample.pairs) == 0 or config.lam == 0:
        lm = l2d.new_zeros(())
    else:
        lm = loss_m(models.decoder, sample.pairs, F1, F2, build_context(F1, F2))
    return l2d, lm


def train_step(models: MVNetModels, batch: Sequence[PairSample], config: TrainConfig,
               optimizer: AdamW) -> LossReport:
    """One optimizer step on the mean objective over ``batch``; teacher stays frozen."""
    if not batch:
        raise InvalidInputError("empty batch")
    models.train()
    optimizer.zero_grad()
    try:
        l2d_sum, lm_sum = 0.0, 0.0
        for sample in batch:
            l2d, lm = pair_losses(models, sample, config)
            l2d_sum = l2d_sum + l2d
            lm_sum = lm_sum + lm
        l2d = (l2d_sum / len(batch)).double()
        lm = (lm_sum / len(batch)).double()
        total = l2d + config.lam * lm
        assert_finite(total, "total loss")
        total.backward()
    except Exception as exc:
        ids = [(s.f1.frame_id, s.f2.frame_id) for s in batch]
        raise TrainStepError(f"training step failed on pairs {ids}: {exc}") from exc
    optimizer.step()
    return LossReport(l2d=l2d.item(), lm=lm.item(), total=total.item())


class Pretrainer:
    """Holds models, optimizer, data and RNG for a pre-training run."""

    def __init__(self, scenes: Sequence[Sequence[RgbdFrame]], config: TrainConfig,
                 models: Optional[MVNetModels] = None, deterministic: Optional[bool] = None):
        if not scenes:
            raise InvalidInputError("no scenes to train on")
        self.config = config
        self.scenes = [list(s) for s in scenes]
        self.threads = configure_threads(deterministic)
        tokens = None
        if config.teacher_source == "imported":
            H, W = self.scenes[0][0].shape
            tokens = (H // config.vit_patch) * (W // config.vit_patch)
        self.models = models or build_models(config, tokens)
        self.optimizer = AdamW(self.models.trainable(), lr=config.lr, weight_decay=config.weight_decay,
                               betas=config.betas)
        self.rng = np.random.default_rng(config.seed)
        self.step_count = 0
        self.history: list[LossReport] = []
        self._overlaps = [overlap_matrix(s, config.depth_tol) for s in self.scenes]

    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        frames = sum(len(s) for s in self.scenes)
        return self.config.epochs * max(1, frames // self.config.batch_size)

    def next_batch(self) -> list[PairSample]:
        cfg = self.config
        batch = []
        for _ in range(cfg.batch_size):
            s = int(self.rng.integers(len(self.scenes)))
            f1, f2 = sample_pair_retrying(self.scenes[s], cfg.overlap_range, cfg.candidate_views, self.rng,
                                          self._overlaps[s])
            batch.append(prepare_pair(f1, f2, cfg, self.rng))
        return batch

    def _batches(self, n: int) -> Iterator[list[PairSample]]:
        if self.threads <= 1:
            for _ in range(n):
                yield self.next_batch()
            return
        # one producer keeps the RNG stream in order, so batches match the serial path
        q: queue.Queue = queue.Queue(maxsize=4)

        def produce():
            try:
                for _ in range(n):
                    q.put(self.next_batch())
            except Exception as exc:  # surfaced on the consumer side
                q.put(exc)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        for _ in range(n):
            item = q.get()
            if isinstance(item, Exception):
                raise item
            yield item
        worker.join()

    def run(self, steps: Optional[int] = None, log_every: int = 0) -> list[LossReport]:
        n = self.total_steps() if steps is None else steps
        for batch in self._batches(n):
            report = train_step(self.models, batch, self.config, self.optimizer)
            self.step_count += 1
            self.history.append(report)
            if log_every and self.step_count % log_every == 0:
                log.info("step %d  L2d %.4f  Lm %.4f  total %.4f", self.step_count, report.l2d, report.lm,
                         report.total)
        return self.history
