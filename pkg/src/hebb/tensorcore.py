"""Dense-array substrate: dtype policy, seeded RNG, matmul, and row ranking.

Arrays are plain numpy ndarrays in C (row-major) order with 64-bit float
payloads; ``DTYPE`` is the single source of truth for precision. Random
numbers come from PCG64, one fixed, named generator, so a recorded seed
reproduces the identical sample stream on every platform.
"""

from __future__ import annotations

import numpy as np

from . import parallel
from .errors import ConfigError, DimensionError

DTYPE = np.float64

# Sharding targets roughly this much work per block so task dispatch stays
# negligible. The decomposition depends only on the operand sizes, never on
# the worker count, which keeps results bit-identical across thread counts.
MATMUL_SHARD_FLOPS = 3.2e7
MATMUL_MIN_SHARD_ROWS = 512


class RngState:
    """Deterministic random stream, seeded once and advanced in call order.

    Backed by numpy's PCG64 bit generator. The generator is part of the
    on-disk reproducibility contract: never change it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        if not 0 <= self.seed < (1 << 64):
            raise ConfigError(f"seed must be an unsigned 64-bit int, got {seed}")
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        """I.i.d. standard-normal samples with the package dtype."""
        return self._gen.standard_normal(size=shape, dtype=DTYPE)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_indices(self, n: int, count: int) -> np.ndarray:
        """`count` distinct indices drawn from range(n)."""
        if count > n:
            raise ConfigError(f"cannot sample {count} distinct indices from {n}")
        return self._gen.choice(n, size=count, replace=False)

    def child(self, offset: int) -> "RngState":
        """Independent stream derived from (seed, offset); stable mapping."""
        return RngState((self.seed * 0x9E3779B97F4A7C15 + offset) % (1 << 64))


def seeded_normal(shape, rng: RngState) -> np.ndarray:
    """Standard-normal tensor drawn from `rng`, advancing it deterministically."""
    return rng.normal(shape)


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (no copy when already one)."""
    return np.ascontiguousarray(data, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with shape validation and deterministic sharding.

    Large products are split into fixed row blocks of `a` and computed on
    the worker pool; each output row is produced by exactly one single-
    threaded BLAS call, so the result does not depend on the thread count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    m, k = a.shape
    n = b.shape[1]
    shard_rows = max(MATMUL_MIN_SHARD_ROWS,
                     int(MATMUL_SHARD_FLOPS / max(2 * k * n, 1)))
    if m < 2 * shard_rows:
        return a @ b
    out = np.empty((m, n), dtype=np.result_type(a, b))

    def block(rng_pair):
        start, stop = rng_pair
        np.dot(a[start:stop], b, out=out[start:stop])

    parallel.map_shards(block, parallel.shard_ranges(m, shard_rows))
    return out


def rank_rows(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row winner (rank 1) and k-th ranked indices by descending value.

    Ties are broken toward the lowest index at every rank: the effective
    sort key is (-value, index). Implemented as k passes of argmax with
    masking, which realises exactly that key order because numpy's argmax
    returns the first maximal element.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise DimensionError(f"rank_rows expects a 2-D array, got {values.shape}")
    units = values.shape[1]
    if k < 1:
        raise ConfigError(f"rank k must be >= 1, got {k}")
    if k > units:
        raise ConfigError(f"rank k={k} exceeds the {units} available units")
    winners = np.argmax(values, axis=1)
    if k == 1:
        return winners, winners.copy()
    work = values.copy()
    rows = np.arange(values.shape[0])
    picked = winners
    for _ in range(k - 1):
        work[rows, picked] = -np.inf
        picked = np.argmax(work, axis=1)
    return winners, picked
