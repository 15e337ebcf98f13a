"""Ray-cast synthetic rooms: textured axis-aligned boxes inside a box-shaped room."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidInputError
from ..geometry import CameraExtrinsics, CameraIntrinsics, RgbdFrame

FLOOR, CEILING, WALL = 0, 1, 2
FIRST_OBJECT = 3

DEFAULT_PALETTE = (
    (0.85, 0.80, 0.70),
    (0.55, 0.35, 0.25),
    (0.30, 0.45, 0.70),
    (0.75, 0.30, 0.30),
    (0.35, 0.65, 0.35),
    (0.90, 0.75, 0.30),
    (0.60, 0.40, 0.70),
    (0.40, 0.70, 0.75),
)

# per-face shading so the three axis orientations read differently
_SHADE = np.array([0.80, 0.90, 1.00])


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    label: int
    checker: float  # texture cell size in meters


@dataclass
class SceneSpec:
    seed: int = 0
    room_extents: tuple[float, float, float] = (1.6, 1.6, 1.2)
    object_count: int = 4
    palette: Sequence[tuple[float, float, float]] = DEFAULT_PALETTE
    resolution: tuple[int, int] = (32, 32)
    trajectory: Optional[list[CameraExtrinsics]] = None
    frames: int = 8
    fov_deg: float = 60.0
    max_depth: float = 10.0
    yaw_step_deg: float = 12.0

    def __post_init__(self):
        if self.trajectory is not None and len(self.trajectory) < 2:
            raise InvalidInputError("a scene needs at least two cameras")
        if self.trajectory is None and self.frames < 2:
            raise InvalidInputError("a scene needs at least two cameras")
        ext = np.asarray(self.room_extents, dtype=np.float64)
        if ext.shape != (3,) or np.any(ext <= 0):
            raise InvalidInputError(f"room extents must be three positive lengths, got {self.room_extents}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        H, W = self.resolution
        return CameraIntrinsics.from_fov(W, H, self.fov_deg)


def default_trajectory(spec: SceneSpec, rng: np.random.Generator) -> list[CameraExtrinsics]:
    """A slow pan from a point near the room center, like a hand-held scan."""
    L = np.asarray(spec.room_extents, dtype=np.float64)
    eye = np.array([rng.uniform(0.4, 0.6) * L[0], rng.uniform(0.4, 0.6) * L[1], rng.uniform(0.5, 0.65) * L[2]])
    yaw0 = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(spec.frames):
        yaw = yaw0 + np.deg2rad(spec.yaw_step_deg) * k + rng.normal(0, np.deg2rad(2.0))
        pitch = np.deg2rad(rng.uniform(-30.0, -15.0))
        step = eye + rng.normal(0, 0.02, size=3)
        d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        poses.append(CameraExtrinsics.look_at(step, step + d))
    return poses


def _scene_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box]:
    L = np.asarray(spec.room_extents, dtype=np.float64)
    palette = np.asarray(spec.palette, dtype=np.float64)
    boxes = []
    for i in range(spec.object_count):
        size = rng.uniform([0.15, 0.15, 0.15], [0.45, 0.45, 0.6]) * np.array([L[0] / 1.6, L[1] / 1.6, L[2] / 1.2])
        # hug a wall so the camera region in the middle stays clear
        side = rng.integers(4)
        lo = np.array([rng.uniform(0, L[0] - size[0]), rng.uniform(0, L[1] - size[1]), 0.0])
        if side == 0:
            lo[0] = rng.uniform(0, 0.1) * L[0]
        elif side == 1:
            lo[0] = L[0] - size[0] - rng.uniform(0, 0.1) * L[0]
        elif side == 2:
            lo[1] = rng.uniform(0, 0.1) * L[1]
        else:
            lo[1] = L[1] - size[1] - rng.uniform(0, 0.1) * L[1]
        color = palette[rng.integers(len(palette))]
        boxes.append(Box(lo, lo + size, color, FIRST_OBJECT + i, checker=rng.choice([0.05, 0.1, 0.15])))
    return boxes


def _texture(point: np.ndarray, axis: np.ndarray, cell: np.ndarray) -> np.ndarray:
    """Checkerboard in the two in-plane coordinates of the hit face."""
    ij = np.floor(point / cell[:, None]).astype(np.int64)
    s = ij.sum(axis=1) - np.take_along_axis(ij, axis[:, None], axis=1)[:, 0]
    return np.where(s % 2 == 0, 1.0, 0.7)


def ray_cast(origin: np.ndarray, dirs: np.ndarray, room: np.ndarray, boxes: Sequence[Box], room_colors: np.ndarray):
    """Nearest hit along each ray ``origin + t * dirs``.

    Returns (t, rgb, label, valid). ``room_colors`` holds floor/ceiling/wall colors.
    """
    n = len(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        # leaving the room: the smallest positive exit distance over the three slabs
        t_axes = np.where(dirs > 0, (room[None] - origin) * inv, np.where(dirs < 0, -origin * inv, np.inf))
    t = t_axes.min(axis=1)
    axis = t_axes.argmin(axis=1)
    up = dirs[np.arange(n), 2] > 0
    label = np.where(axis == 2, np.where(up, CEILING, FLOOR), WALL)
    color = room_colors[label]
    cell = np.full(n, 0.2)
    for box in boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.lo - origin) * inv
            t2 = (box.hi - origin) * inv
        tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        hit = (near <= far) & (near > 1e-9) & (near < t)
        t = np.where(hit, near, t)
        axis = np.where(hit, tmin.argmax(axis=1), axis)
        label = np.where(hit, box.label, label)
        color = np.where(hit[:, None], box.color, color)
        cell = np.where(hit, box.checker, cell)
    point = origin + t[:, None] * dirs
    rgb = color * _texture(point, axis, cell)[:, None] * _SHADE[axis][:, None]
    valid = np.isfinite(t) & (t > 0)
    return t, np.clip(rgb, 0.0, 1.0), label, valid


def render_frame(spec: SceneSpec, extr: CameraExtrinsics, boxes: Sequence[Box], room_colors: np.ndarray,
                 frame_id: str) -> RgbdFrame:
    intr = spec.intrinsics
    H, W = spec.resolution
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    yn = (rows.ravel() - intr.cy) / intr.fy
    xn = (cols.ravel() - intr.cx - intr.skew * yn) / intr.fx
    cam = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    # camera-z component of every direction is 1, so the hit parameter is the depth
    dirs = cam @ extr.R
    t, rgb, label, valid = ray_cast(extr.center, dirs, np.asarray(spec.room_extents, dtype=np.float64), boxes, room_colors)
    valid &= t <= spec.max_depth
    depth = np.where(valid, t, 0.0).reshape(H, W)
    return RgbdFrame(
        rgb=np.where(valid[:, None], rgb, 0.0).reshape(H, W, 3),
        depth=depth,
        valid=valid.reshape(H, W),
        intrinsics=intr,
        extrinsics=extr,
        frame_id=frame_id,
        labels=np.where(valid, label, -1).reshape(H, W),
    )


def generate_scene(spec: SceneSpec) -> list[RgbdFrame]:
    """Render every camera of the scene; frames that see nothing are dropped with a warning."""
    rng = np.random.default_rng(spec.seed)
    palette = np.asarray(spec.palette, dtype=np.float64)
    room_colors = palette[rng.choice(len(palette), size=3, replace=len(palette) < 3)]
    boxes = _scene_boxes(spec, rng)
    trajectory = spec.trajectory if spec.trajectory is not None else default_trajectory(spec, rng)
    L = np.asarray(spec.room_extents, dtype=np.float64)
    frames = []
    for k, extr in enumerate(trajectory):
        c = extr.center
        if np.any(c <= 0) or np.any(c >= L):
            warnings.warn(f"camera {k} of scene {spec.seed} is outside the room; frame excluded")
            continue
        frame = render_frame(spec, extr, boxes, room_colors, frame_id=f"s{spec.seed:04d}_f{k:03d}")
        if not frame.valid.any():
            warnings.warn(f"camera {k} of scene {spec.seed} sees nothing; frame excluded")
            continue
        frames.append(frame)
    return frames


def scene_spec_for(seed: int, frames: int = 8, resolution=(32, 32), **kw) -> SceneSpec:
    return SceneSpec(seed=seed, frames=frames, resolution=tuple(resolution), **kw)
