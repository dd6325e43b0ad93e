"""IDX dataset loading, batching, and splitting.

The IDX container is MNIST's big-endian binary layout: a four-byte magic
(two zero bytes, a dtype byte, a dimension-count byte), one 32-bit
big-endian extent per dimension, then the raw payload. Only dtype 0x08
(unsigned byte) is accepted. Files ending in ``.gz`` are transparently
decompressed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .tensorcore import DTYPE, RngState

_IDX_UBYTE = 0x08


@dataclass
class Dataset:
    """Images scaled to [0,1] with integer class labels.

    images: (count, channels, height, width) float64
    labels: (count,) int64 with values in [0, num_classes)
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be 4-D (n,c,h,w), got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ConfigError(
                f"labels shape {self.labels.shape} does not match "
                f"{len(self.images)} images"
            )
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("image values must lie in [0, 1]")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ConfigError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def count(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


@dataclass
class BatchPlan:
    """Iteration order over a dataset: every sample exactly once per epoch."""

    batch_size: int
    shuffle: bool = False
    rng: RngState | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.shuffle and self.rng is None:
            raise ConfigError("shuffling requires an rng")


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    zero0, zero1, dtype, ndim = raw[0], raw[1], raw[2], raw[3]
    if zero0 != 0 or zero1 != 0:
        raise FormatError(f"{path}: bad magic bytes at offset 0: {raw[:2].hex()}")
    if dtype != _IDX_UBYTE:
        raise FormatError(
            f"{path}: unsupported dtype byte 0x{dtype:02x} at offset 2 "
            f"(only 0x08 unsigned byte is accepted)"
        )
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated at offset {len(raw)}, "
                          f"expected {ndim} extents")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims, dtype=np.int64)) if ndim else 0
    payload = raw[header_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes at offset {header_end}, "
            f"expected {expected} for dims {dims}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx(path) -> np.ndarray:
    """Raw IDX unsigned-byte tensor (no scaling)."""
    return _parse_idx(_read_bytes(path), path)


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte tensor in IDX layout (test/tooling helper)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, _IDX_UBYTE, array.ndim])
    header += struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def load_idx_pair(images_path, labels_path) -> Dataset:
    """Load an images/labels IDX pair, scaling pixels to [0,1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(
            f"{images_path}: expected 3-D image tensor (count,h,w), "
            f"got {images.ndim}-D {images.shape}"
        )
    if labels.ndim != 1:
        raise FormatError(
            f"{labels_path}: expected 1-D label tensor, got {labels.shape}"
        )
    if len(images) != len(labels):
        raise FormatError(
            f"image/label counts differ: {len(images)} in {images_path} "
            f"vs {len(labels)} in {labels_path}"
        )
    scaled = images.astype(DTYPE) / 255.0
    scaled = scaled[:, np.newaxis, :, :]  # grayscale -> channels=1
    num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(scaled, labels.astype(np.int64), num_classes)


def batches(dataset: Dataset, plan: BatchPlan) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches covering each sample exactly once.

    With shuffle, the permutation is drawn from plan.rng, so the order is a
    pure function of the seed. The last batch may be smaller.
    """
    if dataset.count == 0:
        raise ConfigError("cannot iterate an empty dataset")
    if plan.shuffle:
        order = plan.rng.permutation(dataset.count)
    else:
        order = np.arange(dataset.count)
    for start in range(0, dataset.count, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def split(dataset: Dataset, fraction: float, rng: RngState) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive (train, holdout) split; holdout gets `fraction`."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    order = rng.permutation(dataset.count)
    n_holdout = int(round(dataset.count * fraction))
    if n_holdout == 0 or n_holdout == dataset.count:
        raise ConfigError(
            f"fraction {fraction} leaves an empty side for {dataset.count} samples"
        )
    holdout_idx = np.sort(order[:n_holdout])
    train_idx = np.sort(order[n_holdout:])
    return dataset.subset(train_idx), dataset.subset(holdout_idx)
