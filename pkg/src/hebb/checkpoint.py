"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"HEBB"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u32, name UTF-8 bytes
        rank     u32
        extents  rank x u64
        payload  float64 little-endian, row-major
    crc32   u32      CRC-32 of all payload bytes, in tensor order

The round trip is bit-exact; any single corrupted payload byte is caught
by the CRC.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"HEBB"
VERSION = 1


def _model_tensors(model_or_tensors) -> dict[str, np.ndarray]:
    if isinstance(model_or_tensors, dict):
        return model_or_tensors
    return dict(model_or_tensors.param_items())


def save_checkpoint(model_or_tensors, path) -> None:
    """Write every named tensor (model parameters include running stats)."""
    tensors = _model_tensors(model_or_tensors)
    crc = 0
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        crc = zlib.crc32(payload, crc)
        parts.append(payload)
    parts.append(struct.pack("<I", crc))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated at offset {self.offset}, "
                f"needed {n} more bytes"
            )
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into {name: float64 array}, verifying the CRC."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version} (expected {VERSION})"
        )
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(8 * size)
        crc = zlib.crc32(payload, crc)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    stored = r.u32()
    if r.offset != len(data):
        raise CheckpointError(
            f"{path}: {len(data) - r.offset} trailing bytes after checksum"
        )
    if stored != crc:
        raise CheckpointError(
            f"{path}: payload CRC mismatch (stored {stored:#010x}, "
            f"computed {crc:#010x})"
        )
    return tensors


def apply_checkpoint(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into a model, validating the geometry."""
    for name, target in model.param_items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        source = tensors[name]
        if source.shape != target.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {source.shape} in the checkpoint "
                f"but {target.shape} in the model"
            )
        np.copyto(target, source)
