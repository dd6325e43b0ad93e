"""Deterministic CPU parallelism.

All multithreaded kernels in this package follow one discipline: work is
decomposed into shards whose boundaries depend only on the problem size,
never on the worker count, and shard results are combined in shard-index
order. Because the exact same numpy calls are issued on the exact same
operands regardless of how many workers execute them, results are
bit-identical across thread counts.

To keep that guarantee, the BLAS backing numpy is pinned to a single
thread the first time this module is used; parallelism then comes
exclusively from the shard pool, which numpy cooperates with by releasing
the GIL inside its C kernels.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

from threadpoolctl import threadpool_limits

from .errors import ConfigError

T = TypeVar("T")
R = TypeVar("R")

_lock = threading.Lock()
_workers: int | None = None
_executor: ThreadPoolExecutor | None = None
_blas_limiter = None
_in_shard = threading.local()


def _default_workers() -> int:
    env = os.environ.get("HEBB_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _ensure_init() -> None:
    global _workers, _blas_limiter
    if _workers is None:
        with _lock:
            if _workers is None:
                _blas_limiter = threadpool_limits(limits=1, user_api="blas")
                _workers = _default_workers()


def set_threads(count: int) -> None:
    """Set the worker count for all sharded kernels (BLAS stays pinned to 1)."""
    global _workers, _executor, _blas_limiter
    if count < 1:
        raise ConfigError(f"thread count must be >= 1, got {count}")
    with _lock:
        if _blas_limiter is None:
            _blas_limiter = threadpool_limits(limits=1, user_api="blas")
        if _executor is not None and count != _workers:
            _executor.shutdown(wait=True)
            _executor = None
        _workers = count


def threads() -> int:
    """Current worker count (defaults to hardware parallelism / HEBB_THREADS)."""
    _ensure_init()
    assert _workers is not None
    return _workers


def _get_executor() -> ThreadPoolExecutor:
    global _executor
    with _lock:
        if _executor is None:
            _executor = ThreadPoolExecutor(
                max_workers=_workers, thread_name_prefix="hebb-shard"
            )
        return _executor


def shard_ranges(total: int, shard_size: int) -> list[tuple[int, int]]:
    """Fixed-size [start, stop) row blocks; boundaries depend on total only."""
    if total <= 0:
        return []
    return [(s, min(s + shard_size, total)) for s in range(0, total, shard_size)]


def map_shards(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply fn to every item, returning results in item order.

    Runs on the worker pool when more than one worker is configured and the
    call is not already inside a shard task (nested calls degrade to serial
    execution rather than deadlocking the pool).
    """
    n = threads()
    if len(items) <= 1 or n == 1 or getattr(_in_shard, "active", False):
        return [fn(it) for it in items]

    def wrapped(item: T) -> R:
        _in_shard.active = True
        try:
            return fn(item)
        finally:
            _in_shard.active = False

    return list(_get_executor().map(wrapped, items))
