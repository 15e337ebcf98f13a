"""Point clouds from RGB-D pairs, voxel binning, voxel-to-point interpolation,
image-guided patch masking and projection of per-point features into views."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import EmptyCloudError, InvalidGeometryError, InvalidInputError
from .geometry import RgbdFrame, project, unproject

DEFAULT_VOXEL_SIZE = 0.05
DEFAULT_KNN_K = 3
IDW_EPS = 1e-8
ZBUFFER_TIE = 1e-9


@dataclass(eq=False)
class ColoredPointCloud:
    """M points with world positions, RGB colors and (view, row, col) provenance.

    ``provenance[:, 0]`` holds the 1-based view index; ``source_ids[v - 1]`` is
    the frame id of view ``v``.
    """

    positions: np.ndarray
    colors: np.ndarray
    provenance: np.ndarray
    source_ids: tuple[str, ...] = ()
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 3)
        M = len(self.positions)
        if M < 1:
            raise EmptyCloudError("a point cloud needs at least one point")
        if len(self.colors) != M or len(self.provenance) != M:
            raise InvalidInputError("point arrays differ in length")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError("non-finite point positions")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise InvalidInputError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def points6(self) -> np.ndarray:
        """The (M, 6) xyz+rgb array."""
        return np.concatenate([self.positions, self.colors], axis=1)

    def view_index(self, frame_id: str) -> Optional[int]:
        for i, fid in enumerate(self.source_ids):
            if fid == frame_id:
                return i + 1
        return None


@dataclass(eq=False)
class VoxelGrid:
    """Occupied cells of a Cartesian grid.

    Cells are enumerated in lexicographic order of their integer index; every
    per-voxel array in the package follows that order.
    """

    voxel_size: float
    origin: np.ndarray
    indices: np.ndarray  # (M', 3) int64
    features: np.ndarray  # (M', 6) mean xyz+rgb of members
    point_to_voxel: np.ndarray  # (M,)
    offsets: np.ndarray = field(default=None)  # (M', 3) mean member offset inside the cell, in [0, 1)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (self.indices + 0.5) * self.voxel_size

    @property
    def cells(self) -> dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]]:
        """Map from integer cell index to (mean feature, member point indices)."""
        order = np.argsort(self.point_to_voxel, kind="stable")
        bounds = np.searchsorted(self.point_to_voxel[order], np.arange(len(self) + 1))
        return {
            tuple(int(v) for v in self.indices[i]): (self.features[i], order[bounds[i]:bounds[i + 1]])
            for i in range(len(self))
        }


@dataclass(eq=False)
class FeatureVolume:
    features: torch.Tensor  # (M, C)
    cloud: ColoredPointCloud

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.cloud):
            raise InvalidInputError(
                f"feature rows {tuple(self.features.shape)} do not match {len(self.cloud)} points"
            )

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


@dataclass(eq=False)
class FeatureMap:
    data: torch.Tensor  # (H, W, C), zero where coverage is False
    coverage: np.ndarray  # (H, W) bool
    view_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.coverage.shape)

    @property
    def channels(self) -> int:
        return int(self.data.shape[-1])


@dataclass(eq=False)
class PatchMask:
    patch_size: int
    masked: np.ndarray  # (H/p, W/p) bool
    ratio: float

    def pixel_mask(self) -> np.ndarray:
        """(H, W) bool, True where the pixel falls inside a masked patch."""
        p = self.patch_size
        return np.kron(self.masked, np.ones((p, p), dtype=bool)).astype(bool)


def sample_patch_mask(ratio: float, patch_size: int, height: int, width: int, rng_seed=None) -> PatchMask:
    """Mask round(ratio * P) of the P non-overlapping patches, uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError(f"mask ratio must be in [0, 1], got {ratio}")
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise InvalidGeometryError(f"patch size {patch_size} does not divide {height}x{width}")
    gh, gw = height // patch_size, width // patch_size
    total = gh * gw
    count = int(np.floor(ratio * total + 0.5))
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(total, size=count, replace=False)
    masked = np.zeros(total, dtype=bool)
    masked[chosen] = True
    return PatchMask(patch_size=patch_size, masked=masked.reshape(gh, gw), ratio=ratio)


def build_point_cloud(
    f1: RgbdFrame,
    f2: Optional[RgbdFrame] = None,
    mask1: Optional[PatchMask] = None,
    mask2: Optional[PatchMask] = None,
) -> ColoredPointCloud:
    """One point per valid, unmasked pixel of each frame.

    ``f2`` may be omitted to build a single-view cloud.
    """
    frames = [f1] if f2 is None else [f1, f2]
    masks = [mask1, mask2][: len(frames)]
    pos, col, prov, lab = [], [], [], []
    have_labels = all(f.labels is not None for f in frames)
    for view, (frame, mask) in enumerate(zip(frames, masks), start=1):
        keep = frame.valid.copy()
        if mask is not None:
            pm = mask.pixel_mask()
            if pm.shape != keep.shape:
                raise InvalidGeometryError(f"mask {pm.shape} does not cover frame {keep.shape}")
            keep &= ~pm
        rc = np.argwhere(keep)
        if len(rc) == 0:
            continue
        pix = np.stack([rc[:, 1], rc[:, 0]], axis=1).astype(np.float64)
        pos.append(unproject(pix, frame.depth[rc[:, 0], rc[:, 1]], frame.intrinsics, frame.extrinsics))
        col.append(frame.rgb[rc[:, 0], rc[:, 1]])
        prov.append(np.column_stack([np.full(len(rc), view), rc]))
        if have_labels:
            lab.append(frame.labels[rc[:, 0], rc[:, 1]])
    if not pos:
        raise EmptyCloudError("no valid unmasked pixels in either frame")
    return ColoredPointCloud(
        positions=np.concatenate(pos),
        colors=np.concatenate(col),
        provenance=np.concatenate(prov),
        source_ids=tuple(f.frame_id for f in frames),
        labels=np.concatenate(lab) if have_labels else None,
    )


def voxelize(cloud: ColoredPointCloud, voxel_size: float = DEFAULT_VOXEL_SIZE, origin=None) -> VoxelGrid:
    """Bin points into cubic cells; each cell carries the mean of its members' xyz+rgb.

    ``origin`` defaults to the componentwise minimum of the positions.
    """
    if not voxel_size > 0:
        raise InvalidInputError(f"voxel size must be positive, got {voxel_size}")
    if origin is None:
        origin = cloud.positions.min(axis=0)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    if np.any(cloud.positions < origin):
        raise InvalidInputError("origin must not exceed any point coordinate")
    scaled = (cloud.positions - origin) / voxel_size
    idx = np.floor(scaled).astype(np.int64)
    cells, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    feats = np.zeros((len(cells), 6))
    np.add.at(feats, inverse, cloud.points6)
    feats /= counts[:, None]
    offs = np.zeros((len(cells), 3))
    np.add.at(offs, inverse, scaled - idx)
    offs /= counts[:, None]
    return VoxelGrid(
        voxel_size=float(voxel_size),
        origin=origin,
        indices=cells,
        features=feats,
        point_to_voxel=inverse,
        offsets=offs,
    )


def knn_interpolate(
    voxel_features: torch.Tensor,
    grid: VoxelGrid,
    cloud: ColoredPointCloud,
    k: int = DEFAULT_KNN_K,
) -> FeatureVolume:
    """Inverse-distance-weighted mean of the k nearest voxel-center features.

    ``k`` larger than the number of voxels is clamped. A point sitting exactly on
    a voxel center receives that voxel's feature unchanged.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if voxel_features.shape[0] != len(grid):
        raise InvalidInputError(f"{voxel_features.shape[0]} feature rows for {len(grid)} voxels")
    k = min(k, len(grid))
    tree = cKDTree(grid.centers)
    dist, nbr = tree.query(cloud.positions, k=k)
    dist = np.asarray(dist, dtype=np.float64).reshape(len(cloud), k)
    nbr = np.asarray(nbr, dtype=np.int64).reshape(len(cloud), k)
    w = 1.0 / (dist + IDW_EPS)
    hit = dist == 0.0
    exact = hit.any(axis=1)
    w[exact] = hit[exact].astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)
    nbr_t = torch.from_numpy(nbr)
    w_t = torch.from_numpy(w).to(voxel_features.dtype)
    if k == 1:
        out = voxel_features[nbr_t[:, 0]]
    else:
        out = (voxel_features[nbr_t] * w_t[..., None]).sum(dim=1)
        # exact hits copy the row verbatim instead of going through the weighted sum
        if exact.any():
            ex = torch.from_numpy(np.flatnonzero(exact))
            first = torch.from_numpy(np.argmax(hit[exact], axis=1))
            out = out.index_put((ex,), voxel_features[nbr_t[ex, first]])
    return FeatureVolume(out, cloud)


def zbuffer(pixel_index: np.ndarray, depth: np.ndarray, n_pixels: int) -> tuple[np.ndarray, np.ndarray]:
    """Resolve pixel collisions: nearest depth wins, near-ties go to the smaller point index.

    Returns (pixels, winning point indices), one entry per written pixel.
    """
    best = np.full(n_pixels, np.inf)
    np.minimum.at(best, pixel_index, depth)
    contender = depth <= best[pixel_index] + ZBUFFER_TIE
    winner = np.full(n_pixels, np.iinfo(np.int64).max)
    pts = np.flatnonzero(contender)
    np.minimum.at(winner, pixel_index[pts], pts)
    written = np.flatnonzero(winner != np.iinfo(np.int64).max)
    return written, winner[written]


def project_features(volume: FeatureVolume, frame: RgbdFrame) -> FeatureMap:
    """Splat the per-point features into ``frame`` with z-buffering.

    Points whose provenance is this very frame go to their source pixel.
    """
    cloud = volume.cloud
    H, W = frame.shape
    pix, z = project(cloud.positions, frame.intrinsics, frame.extrinsics)
    with np.errstate(invalid="ignore"):
        col = np.floor(pix[:, 0] + 0.5)
        row = np.floor(pix[:, 1] + 0.5)
    view = cloud.view_index(frame.frame_id)
    if view is not None:
        own = cloud.provenance[:, 0] == view
        row[own] = cloud.provenance[own, 1]
        col[own] = cloud.provenance[own, 2]
    ok = (z > 0) & (col >= 0) & (col <= W - 1) & (row >= 0) & (row <= H - 1)
    pts = np.flatnonzero(ok)
    flat = row[pts].astype(np.int64) * W + col[pts].astype(np.int64)
    written, local = zbuffer(flat, z[pts], H * W)
    winners = pts[local]
    C = volume.channels
    data = volume.features.new_zeros((H * W, C))
    if len(written):
        data = data.index_put((torch.from_numpy(written),), volume.features[torch.from_numpy(winners)])
    coverage = np.zeros(H * W, dtype=bool)
    coverage[written] = True
    return FeatureMap(data=data.reshape(H, W, C), coverage=coverage.reshape(H, W), view_id=frame.frame_id)


def frame_pixel_mask(frame: RgbdFrame, mask: Optional[PatchMask]) -> np.ndarray:
    keep = frame.valid.copy()
    if mask is not None:
        keep &= ~mask.pixel_mask()
    return keep

