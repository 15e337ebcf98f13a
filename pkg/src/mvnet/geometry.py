"""Pinhole camera model, ground-truth correspondences and view overlap.

Conventions
-----------
* Pixel centers sit at integer coordinates; ``x`` is the column, ``y`` the row.
* Normalized coordinates divide by ``(W, H)``.
* Extrinsics map world to camera: ``X_cam = R @ X_world + T``.
* Depth is the camera-frame ``Z`` coordinate, not the ray length.

All arithmetic is float64 and written out per component (no BLAS calls), so a
scalar loop over the same formulas reproduces the vectorized results bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidDepthError, InvalidInputError, UndefinedRatioError

DEFAULT_DEPTH_TOL = 0.01
DEFAULT_STRIDE = 4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"resolution must be >= 1, got {self.width}x{self.height}")
        for name in ("fx", "fy", "cx", "cy", "skew"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} is not finite")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        """Square-pixel camera with the given horizontal field of view."""
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(T))):
            raise InvalidInputError("extrinsics must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("R must be a proper rotation (orthonormal, det 1)")
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @property
    def E(self) -> np.ndarray:
        E = np.eye(4)
        E[:3, :3] = self.R
        E[:3, 3] = self.T
        return E

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -(self.R.T @ self.T)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraExtrinsics":
        """Pose of a camera at ``eye`` looking at ``target``; image y points along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            raise InvalidInputError("viewing direction is parallel to the up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        # re-orthonormalize so the 1e-9 invariant holds after the cross products
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(R=R, T=-(R @ eye))


@dataclass(eq=False)
class RgbdFrame:
    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    frame_id: str = ""
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        H, W = self.depth.shape
        if self.rgb.shape != (H, W, 3) or self.valid.shape != (H, W):
            raise InvalidInputError(
                f"rgb {self.rgb.shape}, depth {self.depth.shape} and valid {self.valid.shape} disagree"
            )
        if (H, W) != (self.intrinsics.height, self.intrinsics.width):
            raise InvalidInputError(
                f"image {H}x{W} does not match intrinsics {self.intrinsics.height}x{self.intrinsics.width}"
            )
        if self.rgb.min(initial=0.0) < 0.0 or self.rgb.max(initial=0.0) > 1.0:
            raise InvalidInputError("rgb values must lie in [0, 1]")
        d = self.depth[self.valid]
        if not np.all(np.isfinite(d) & (d > 0)):
            raise InvalidInputError("valid pixels need finite positive depth")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(eq=False)
class CorrespondenceSet:
    """Pairs of normalized coordinates: ``x`` in view 1, ``x_gt`` in view 2."""

    x: np.ndarray
    x_gt: np.ndarray
    source_ids: tuple[str, str] = ("", "")

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.x_gt = np.asarray(self.x_gt, dtype=np.float64).reshape(-1, 2)
        if len(self.x) != len(self.x_gt):
            raise InvalidInputError("x and x_gt must have the same length")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.x, self.x_gt))

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.x[idx], self.x_gt[idx], self.source_ids)


def _world_to_camera(points: np.ndarray, extr: CameraExtrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    R, T = extr.R, extr.T
    X, Y, Z = points[..., 0], points[..., 1], points[..., 2]
    xc = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + T[0]
    yc = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + T[1]
    zc = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + T[2]
    return xc, yc, zc


def project(points, intr: CameraIntrinsics, extr: CameraExtrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixels (..., 2) and camera depth (...).

    Points behind the camera still come back; their depth is <= 0 and the
    caller decides what to do with them.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 3:
        raise InvalidInputError(f"points must have a trailing axis of 3, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("non-finite point coordinates")
    xc, yc, zc = _world_to_camera(points, extr)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (intr.fx * xc + intr.skew * yc) / zc + intr.cx
        v = intr.fy * yc / zc + intr.cy
    return np.stack([u, v], axis=-1), zc


def unproject(pixels, depth, intr: CameraIntrinsics, extr: CameraExtrinsics) -> np.ndarray:
    """Lift pixels (..., 2) with camera depth (...) to world points (..., 3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if pixels.shape[-1] != 2:
        raise InvalidInputError(f"pixels must have a trailing axis of 2, got {pixels.shape}")
    if not (np.all(np.isfinite(pixels)) and np.all(np.isfinite(depth))):
        raise InvalidInputError("non-finite pixel or depth")
    if np.any(depth <= 0):
        raise InvalidDepthError("depth must be positive")
    yn = (pixels[..., 1] - intr.cy) / intr.fy
    xn = (pixels[..., 0] - intr.cx - intr.skew * yn) / intr.fx
    xc, yc, zc = xn * depth, yn * depth, depth * np.ones_like(xn)
    # world = R^T (cam - T)
    R, T = extr.R, extr.T
    dx, dy, dz = xc - T[0], yc - T[1], zc - T[2]
    X = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
    Y = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
    Z = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
    return np.stack([X, Y, Z], axis=-1)


def pixel_grid(height: int, width: int, stride: int = 1) -> np.ndarray:
    """(N, 2) integer (row, col) lattice in row-major order."""
    rows, cols = np.meshgrid(np.arange(0, height, stride), np.arange(0, width, stride), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def _reproject(f1: RgbdFrame, f2: RgbdFrame, rc: np.ndarray, depth_tol: float):
    """Reproject f1 pixels ``rc`` (row, col) into f2; return (visible mask, f2 pixels)."""
    rows, cols = rc[:, 0], rc[:, 1]
    pix = np.stack([cols, rows], axis=1).astype(np.float64)
    world = unproject(pix, f1.depth[rows, cols], f1.intrinsics, f1.extrinsics)
    p2, z2 = project(world, f2.intrinsics, f2.extrinsics)
    H2, W2 = f2.shape
    with np.errstate(invalid="ignore"):
        c2 = np.floor(p2[:, 0] + 0.5)
        r2 = np.floor(p2[:, 1] + 0.5)
        inside = (z2 > 0) & (c2 >= 0) & (c2 <= W2 - 1) & (r2 >= 0) & (r2 <= H2 - 1)
    ok = np.zeros(len(rc), dtype=bool)
    idx = np.flatnonzero(inside)
    c2 = c2[idx].astype(np.int64)
    r2 = r2[idx].astype(np.int64)
    seen = f2.valid[r2, c2]
    ok[idx] = seen & (np.abs(z2[idx] - np.where(seen, f2.depth[r2, c2], np.inf)) <= depth_tol)
    return ok, p2


def ground_truth_correspondences(
    f1: RgbdFrame,
    f2: RgbdFrame,
    stride: int = DEFAULT_STRIDE,
    depth_tol: float = DEFAULT_DEPTH_TOL,
) -> CorrespondenceSet:
    """Visible f1→f2 correspondences on a ``stride`` lattice, normalized to [0, 1]².

    Both frames must live in the same world frame; that cannot be checked here.
    """
    H1, W1 = f1.shape
    H2, W2 = f2.shape
    rc = pixel_grid(H1, W1, stride)
    rc = rc[f1.valid[rc[:, 0], rc[:, 1]]]
    if len(rc) == 0:
        return CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)), (f1.frame_id, f2.frame_id))
    ok, p2 = _reproject(f1, f2, rc, depth_tol)
    x = np.stack([rc[ok, 1] / W1, rc[ok, 0] / H1], axis=1)
    # a pixel counts as in-bounds when its nearest integer pixel does; the
    # continuous position is clamped onto the pixel-center range
    u2 = np.clip(p2[ok, 0], 0.0, W2 - 1.0)
    v2 = np.clip(p2[ok, 1], 0.0, H2 - 1.0)
    x_gt = np.stack([u2 / W2, v2 / H2], axis=1)
    return CorrespondenceSet(x, x_gt, (f1.frame_id, f2.frame_id))


def overlap_ratio(f1: RgbdFrame, f2: RgbdFrame, depth_tol: float = DEFAULT_DEPTH_TOL) -> float:
    """Fraction of f1's valid pixels that are visibly re-observed by f2 (directional)."""
    rc = np.argwhere(f1.valid)
    if len(rc) == 0:
        raise UndefinedRatioError(f"frame {f1.frame_id!r} has no valid pixels")
    ok, _ = _reproject(f1, f2, rc, depth_tol)
    return float(ok.sum()) / float(len(rc))
