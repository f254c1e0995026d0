"""Binary checkpoint container.

Layout: magic "RMTC", u32 format version, length-prefixed stage tag, u32 epoch,
u32 record count, then records sorted by name. Each record is a u32 name
length, the UTF-8 name, u32 ndim, u32 dims, u64 payload byte count, and the
float32 little-endian payload. Sorting on save makes save -> load -> save
byte-identical regardless of container insertion order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"RMTC"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(RuntimeError):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


@dataclass
class CheckpointContainer:
    stage: str
    epoch: int
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = CHECKPOINT_VERSION

    def put(self, name: str, array: np.ndarray) -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate array name {name!r}")
        # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them)
        self.arrays[name] = np.asarray(array, dtype=np.float32, order="C")


def save_checkpoint(container: CheckpointContainer, path: str | Path) -> None:
    stage_bytes = container.stage.encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<I", container.version),
             struct.pack("<I", len(stage_bytes)), stage_bytes,
             struct.pack("<I", container.epoch),
             struct.pack("<I", len(container.arrays))]
    for name in sorted(container.arrays):
        arr = np.asarray(container.arrays[name], dtype="<f4", order="C")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str | Path,
                    expected_stage: str | None = None) -> CheckpointContainer:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    stage = r.take(r.u32()).decode("utf-8")
    if expected_stage is not None and stage != expected_stage:
        raise CheckpointFormatError(
            f"{path}: stage tag {stage!r} does not match expected {expected_stage!r}")
    epoch = r.u32()
    count = r.u32()
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim))) if ndim else ()
        nbytes = r.u64()
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if ndim == 0:
            expected = 4
        if nbytes != expected:
            raise CheckpointFormatError(
                f"{path}: record {name!r} payload {nbytes} != expected {expected}")
        if name in arrays:
            raise CheckpointFormatError(f"{path}: duplicate record {name!r}")
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).copy()
        arrays[name] = arr
    if r.off != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.off} trailing bytes")
    return CheckpointContainer(stage=stage, epoch=epoch, arrays=arrays, version=version)
