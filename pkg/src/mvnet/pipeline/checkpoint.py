"""Binary checkpoints.

Layout (little-endian)::

    b"MVNT" | version u32 | meta length u32 | meta JSON bytes
    then records until EOF:
    name length u32 | name UTF-8 | half tag u8 | ndim u32 | dims u32[ndim] | f32 data

The meta JSON carries the training config, step counters and RNG state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..errors import BadMagicError, TruncatedCheckpointError, VersionMismatchError
from ..nn import AdamW
from .training import MVNetModels, TrainConfig, build_models

MAGIC = b"MVNT"
FORMAT_VERSION = 1

HALF_TAGS = {"encoder": 0, "decoder": 1, "student": 2, "correspondence": 3, "optimizer": 4}
TAG_NAMES = {v: k for k, v in HALF_TAGS.items()}


@dataclass(eq=False)
class Checkpoint:
    version: int
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def half(self, tag: str) -> dict[str, np.ndarray]:
        return {n: t for n, t in self.tensors.items() if self.tags[n] == tag}

    def encoder_half(self) -> dict[str, np.ndarray]:
        """The transferable weights: the 3D network's encoder half only."""
        return self.half("encoder")


def _model_records(models: MVNetModels):
    enc = models.encoder
    for name, t in enc.state_dict().items():
        yield f"encoder3d.{name}", enc.parameter_half(name), t
    for name, t in models.student.state_dict().items():
        yield f"student.{name}", "student", t
    for name, t in models.decoder.state_dict().items():
        yield f"decoder.{name}", "correspondence", t


def _json_safe_rng(rng: Optional[np.random.Generator]):
    return None if rng is None else rng.bit_generator.state


def save_checkpoint(path, models: MVNetModels, config: TrainConfig, optimizer: Optional[AdamW] = None,
                    rng: Optional[np.random.Generator] = None, step: int = 0) -> Path:
    records = list(_model_records(models))
    meta = {"config": config.to_dict(), "step": step, "rng": _json_safe_rng(rng)}
    if optimizer is not None:
        st = optimizer.state
        meta["optimizer"] = {"step": st.step, "lr": st.lr, "weight_decay": st.weight_decay,
                             "betas": list(st.betas), "eps": st.eps}
        for pname in optimizer.params:
            if pname in st.exp_avg:
                records.append((f"optim.exp_avg.{pname}", "optimizer", st.exp_avg[pname]))
                records.append((f"optim.exp_avg_sq.{pname}", "optimizer", st.exp_avg_sq[pname]))
    blob = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name, tag, tensor in records:
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            raw_name = name.encode()
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BI", HALF_TAGS[tag], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedCheckpointError(f"{path}: file too short for a checkpoint header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    r = _Reader(raw, path)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    meta = json.loads(r.take(meta_len).decode())
    ckpt = Checkpoint(version=version, meta=meta)
    while not r.done:
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        tag, ndim = r.unpack("<BI")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        ckpt.tensors[name] = data
        ckpt.tags[name] = TAG_NAMES.get(tag, f"tag{tag}")
    return ckpt


def _load_module(module: torch.nn.Module, prefix: str, ckpt: Checkpoint):
    state = {n[len(prefix) + 1:]: torch.from_numpy(t.copy()) for n, t in ckpt.tensors.items()
             if n.startswith(prefix + ".")}
    module.load_state_dict(state)


def restore(ckpt: Checkpoint, with_optimizer: bool = False):
    """Rebuild models (and optionally the optimizer and RNG) from a checkpoint."""
    config = ckpt.config
    models = build_models(config)
    _load_module(models.encoder, "encoder3d", ckpt)
    _load_module(models.student, "student", ckpt)
    _load_module(models.decoder, "decoder", ckpt)
    if not with_optimizer:
        return models
    opt = AdamW(models.trainable(), lr=config.lr, weight_decay=config.weight_decay, betas=config.betas)
    meta = ckpt.meta.get("optimizer")
    if meta:
        opt.state.step = meta["step"]
        for pname in opt.params:
            key = f"optim.exp_avg.{pname}"
            if key in ckpt.tensors:
                opt.state.exp_avg[pname] = torch.from_numpy(ckpt.tensors[key].copy())
                opt.state.exp_avg_sq[pname] = torch.from_numpy(ckpt.tensors[f"optim.exp_avg_sq.{pname}"].copy())
    rng = np.random.default_rng()
    if ckpt.meta.get("rng") is not None:
        rng.bit_generator.state = ckpt.meta["rng"]
    return models, opt, rng


def load_encoder_weights(model, ckpt: Checkpoint, strict: bool = False):
    """Copy only the encoder-half weights into a 3D network, as for downstream fine-tuning."""
    state = {n[len("encoder3d."):]: torch.from_numpy(t.copy()) for n, t in ckpt.encoder_half().items()}
    return model.load_state_dict(state, strict=strict)
