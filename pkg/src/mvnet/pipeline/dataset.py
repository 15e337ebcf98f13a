"""On-disk scene layout.

One directory per scene holding ``manifest.json`` and, per frame,
``rgb_<id>.ppm`` (binary P6), ``depth_<id>.pfm`` (grayscale, little-endian),
``valid_<id>.pbm`` (binary P4) and optionally ``label_<id>.pgm`` (binary P5,
16-bit, label + 1 so that 0 marks invalid pixels).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import InvalidInputError
from ..geometry import CameraExtrinsics, CameraIntrinsics, RgbdFrame

MANIFEST = "manifest.json"


def _read_header(fh, fields: int) -> list[bytes]:
    tokens: list[bytes] = []
    while len(tokens) < fields:
        line = fh.readline()
        if not line:
            raise InvalidInputError(f"{fh.name}: truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def write_ppm(path, rgb: np.ndarray) -> None:
    H, W, _ = rgb.shape
    data = np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header(fh, 4)
        if magic != b"P6" or int(maxval) != 255:
            raise InvalidInputError(f"{path}: expected an 8-bit binary P6 image")
        W, H = int(w), int(h)
        data = np.frombuffer(fh.read(W * H * 3), dtype=np.uint8)
    if data.size != W * H * 3:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


def write_pfm(path, image: np.ndarray) -> None:
    H, W = image.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode())
        # PFM stores rows bottom to top
        fh.write(np.ascontiguousarray(image[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, scale = _read_header(fh, 4)
        if magic != b"Pf":
            raise InvalidInputError(f"{path}: expected a grayscale PFM")
        W, H, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(W * H * 4), dtype=dtype)
    if data.size != W * H:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return data.reshape(H, W)[::-1].astype(np.float64)


def write_pbm(path, mask: np.ndarray) -> None:
    H, W = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P4\n{W} {H}\n".encode())
        fh.write(np.packbits(mask.astype(bool), axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h = _read_header(fh, 3)
        if magic != b"P4":
            raise InvalidInputError(f"{path}: expected a binary P4 bitmap")
        W, H = int(w), int(h)
        row = (W + 7) // 8
        data = np.frombuffer(fh.read(row * H), dtype=np.uint8)
    if data.size != row * H:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return np.unpackbits(data.reshape(H, row), axis=1)[:, :W].astype(bool)


def write_pgm16(path, image: np.ndarray) -> None:
    H, W = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n65535\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header(fh, 4)
        if magic != b"P5" or int(maxval) != 65535:
            raise InvalidInputError(f"{path}: expected a 16-bit binary P5 image")
        W, H = int(w), int(h)
        data = np.frombuffer(fh.read(W * H * 2), dtype=">u2")
    if data.size != W * H:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return data.reshape(H, W).astype(np.int64)


def save_scene(directory, frames: Iterable[RgbdFrame]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for f in frames:
        intr, extr = f.intrinsics, f.extrinsics
        write_ppm(directory / f"rgb_{f.frame_id}.ppm", f.rgb)
        write_pfm(directory / f"depth_{f.frame_id}.pfm", np.where(f.valid, f.depth, 0.0))
        write_pbm(directory / f"valid_{f.frame_id}.pbm", f.valid)
        entry = {
            "id": f.frame_id,
            "width": intr.width,
            "height": intr.height,
            "intrinsics": {"fx": intr.fx, "fy": intr.fy, "skew": intr.skew, "cx": intr.cx, "cy": intr.cy},
            "extrinsics": {"R": [float(v) for v in extr.R.ravel()], "T": [float(v) for v in extr.T]},
        }
        if f.labels is not None:
            write_pgm16(directory / f"label_{f.frame_id}.pgm", f.labels + 1)
            entry["labels"] = True
        entries.append(entry)
    path = directory / MANIFEST
    path.write_text(json.dumps({"frames": entries}, indent=1))
    return path


def load_scene(directory) -> list[RgbdFrame]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    frames = []
    for e in manifest["frames"]:
        fid = e["id"]
        rgb = read_ppm(directory / f"rgb_{fid}.ppm")
        depth = read_pfm(directory / f"depth_{fid}.pfm")
        valid = read_pbm(directory / f"valid_{fid}.pbm")
        H, W = depth.shape
        k = e["intrinsics"]
        intr = CameraIntrinsics(fx=k["fx"], fy=k["fy"], cx=k["cx"], cy=k["cy"], skew=k.get("skew", 0.0),
                                width=e.get("width", W), height=e.get("height", H))
        R = np.asarray(e["extrinsics"]["R"], dtype=np.float64).reshape(3, 3)
        T = np.asarray(e["extrinsics"]["T"], dtype=np.float64)
        labels = None
        if e.get("labels"):
            labels = read_pgm16(directory / f"label_{fid}.pgm") - 1
        frames.append(RgbdFrame(rgb, depth, valid, intr, CameraExtrinsics(R, T), fid, labels))
    return frames


def scene_dirs(root) -> list[Path]:
    """Scene directories under ``root`` (or ``root`` itself if it holds a manifest), sorted."""
    root = Path(root)
    if (root / MANIFEST).exists():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / MANIFEST).exists())
    if not found:
        raise InvalidInputError(f"no scene manifests under {root}")
    return found


def load_dataset(root) -> list[list[RgbdFrame]]:
    return [load_scene(d) for d in scene_dirs(root)]
