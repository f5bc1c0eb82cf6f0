"""Deterministic chunked execution.

Work is cut into fixed-size chunks whose boundaries depend only on the total
size and ``chunk_size``.  Chunk ``i`` always draws from ``rng.substream(i)`` and
results come back in chunk order, so the worker count changes wall time and
nothing else.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, TypeVar

from .dist import RngStream

T = TypeVar("T")

DEFAULT_CHUNK = 50_000


def chunk_sizes(total: int, chunk_size: int = DEFAULT_CHUNK) -> list[int]:
    if total < 0:
        raise ValueError("total must be nonnegative")
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    full, rest = divmod(total, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def _call(args):
    func, size, rng = args
    return func(size, rng)


def map_chunks(
    func: Callable[[int, RngStream], T],
    total: int,
    rng: RngStream,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> list[T]:
    """Run ``func(size, substream)`` over every chunk and return results in chunk order.

    With ``workers > 1`` chunks go to a process pool, so ``func`` must be picklable
    (a module-level function or a ``functools.partial`` of one).
    """
    jobs = [(func, size, rng.substream(i)) for i, size in enumerate(chunk_sizes(total, chunk_size))]
    if workers <= 1 or len(jobs) <= 1:
        return [_call(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, jobs))
