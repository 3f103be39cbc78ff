"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"EGC1"                       magic
    u32                           format version
    u32 + utf-8                   descriptor (JSON: architecture + training config)
    u32 + utf-8, u32, f64[T]      schedule kind, T, betas
    u32                           tensor count
      per tensor: u32 + utf-8 name, u32 rank, u32[rank] dims, f64[prod(dims)]
    u32 + utf-8                   RNG state (JSON)
    u64                           iteration counter
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schedule import NoiseSchedule

MAGIC = b"EGC1"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, path, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


@dataclass
class Checkpoint:
    descriptor: dict
    schedule: NoiseSchedule
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    iteration: int = 0

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors stored under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_str(json.dumps(ckpt.descriptor, sort_keys=True)))
    betas = ckpt.schedule.betas()
    parts.append(_str(ckpt.schedule.kind))
    parts.append(struct.pack("<I", betas.size))
    parts.append(np.asarray(betas, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        parts.append(_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(_str(json.dumps(ckpt.rng_state, sort_keys=True)))
    parts.append(struct.pack("<Q", int(ckpt.iteration)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(self.path, "truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(self.path, "corrupt string block") from exc

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def from_bytes(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise CheckpointError(path, "bad magic, not an EGC checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(path, f"unsupported checkpoint version {version}")
    try:
        descriptor = json.loads(r.string())
        kind = r.string()
        T = r.u32()
        sched = NoiseSchedule(kind, r.f64(T))
        tensors = {}
        for _ in range(r.u32()):
            name = r.string()
            rank = r.u32()
            dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
            tensors[name] = r.f64(int(np.prod(dims, dtype=np.int64))).reshape(dims)
        rng_state = json.loads(r.string())
        (iteration,) = struct.unpack("<Q", r.take(8))
    except (json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(path, f"corrupt checkpoint ({exc})") from exc
    if r.pos != len(buf):
        raise CheckpointError(path, "trailing bytes after checkpoint")
    return Checkpoint(descriptor, sched, tensors, rng_state, int(iteration))


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path) -> None:
    atomic_write(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(path, "checkpoint not found") from exc
    return from_bytes(buf, path)
