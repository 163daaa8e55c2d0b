"""Flat binary checkpoint: named float64 tensors, a QuantSpec section, and a JSON metadata trailer.

Layout (all integers little-endian unsigned 32-bit):

    magic b"LQCK" | version | tensor count
    per tensor: name length | name (utf-8) | rank | extents... | float64 values (little-endian)
    spec count
    per spec: name length | name | bits | scale (float64) | target (0 weight, 1 activation) | flags
    metadata length | metadata JSON (utf-8)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .quant import QuantSpec

MAGIC = b"LQCK"
VERSION = 1
_TARGETS = ("weight", "activation")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    quant: dict[str, QuantSpec] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def _name(fh: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    _u32(fh, len(raw))
    fh.write(raw)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], quant: Mapping[str, QuantSpec] | None = None,
                    meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _u32(fh, VERSION)
        _u32(fh, len(tensors))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")  # tobytes() writes C order; keeps 0-d shapes
            _name(fh, name)
            _u32(fh, arr.ndim)
            for d in arr.shape:
                _u32(fh, d)
            fh.write(arr.tobytes())
        quant = quant or {}
        _u32(fh, len(quant))
        for name, spec in quant.items():
            _name(fh, name)
            _u32(fh, spec.bits)
            fh.write(struct.pack("<d", spec.scale))
            _u32(fh, _TARGETS.index(spec.target))
            _u32(fh, int(spec.frozen) | (int(spec.degenerate) << 1))
        raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        _u32(fh, len(raw))
        fh.write(raw)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.name()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    quant = {}
    for _ in range(r.u32()):
        name = r.name()
        bits = r.u32()
        scale = struct.unpack("<d", r.take(8))[0]
        target = _TARGETS[r.u32()]
        flags = r.u32()
        quant[name] = QuantSpec(bits, scale, target, bool(flags & 1), bool(flags & 2))
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(tensors, quant, meta)
