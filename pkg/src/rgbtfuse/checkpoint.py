"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"RGBTCKPT"
    version u32
    epoch   u32
    meta    u32 length + UTF-8 text, one key=value per line
    count   u32
    count x record:
        name   u16 length + UTF-8
        ndim   u8, then ndim x u32 dims
        data   prod(dims) x float32 (little-endian)

Tensor names carry a section prefix: ``model/``, ``ema/``, ``optim.m/``,
``optim.v/``. The ``ema/`` section exists only when EMA is enabled.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"RGBTCKPT"
VERSION = 1
SECTIONS = ("model", "ema", "optim.m", "optim.v")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    epoch: int = 0
    metadata: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    def section(self, name: str) -> "OrderedDict[str, np.ndarray]":
        prefix = name + "/"
        return OrderedDict((k[len(prefix):], v) for k, v in self.tensors.items() if k.startswith(prefix))

    def has_section(self, name: str) -> bool:
        return any(k.startswith(name + "/") for k in self.tensors)

    def add_section(self, name: str, state: dict):
        if name not in SECTIONS:
            raise CheckpointError(f"unknown checkpoint section {name!r}")
        for k, v in state.items():
            self.tensors[f"{name}/{k}"] = np.asarray(v)


def _pack_meta(meta: dict) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded as key=value")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _unpack_meta(raw: bytes) -> dict:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return meta


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", ckpt.version, ckpt.epoch)]
    meta = _pack_meta(ckpt.metadata)
    out += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} holds non-finite values")
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)) + enc)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, epoch = r.unpack("<II", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = _unpack_meta(r.take(meta_len, "metadata"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(size * 4, f"data of {name}"), dtype=_F32)
        tensors[name] = data.astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(epoch, meta, tensors, version)


def save_checkpoint(path, model, epoch: int = 0, optimizer=None, ema=None, metadata: dict | None = None):
    ckpt = Checkpoint(epoch, dict(metadata or {}))
    ckpt.add_section("model", model.state_dict())
    if ema is not None:
        ckpt.add_section("ema", ema.state_dict())
    if optimizer is not None:
        m, v = optimizer.moment_state()
        ckpt.add_section("optim.m", m)
        ckpt.add_section("optim.v", v)
        ckpt.metadata["optim_step"] = optimizer.step_count
    Path(path).write_bytes(to_bytes(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes())


def restore_model(ckpt: Checkpoint, model, use_ema: bool = False):
    """Load the model (or EMA shadow) weights into ``model``."""
    section = "ema" if use_ema else "model"
    if not ckpt.has_section(section):
        raise CheckpointError(f"checkpoint has no {section!r} section")
    model.load_state_dict(ckpt.section(section))
    return model
