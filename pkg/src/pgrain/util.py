"""Process-wide parallelism helpers.

The PGRAIN_THREADS environment variable caps the number of worker threads
used by embarrassingly parallel loops (sigma maps, per-scene evaluation).
Work is split into ordered chunks and results are reassembled by position,
so the thread count never changes any output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def max_workers() -> int:
    """Worker-thread cap: PGRAIN_THREADS if set, else min(4, cpu count)."""
    raw = os.environ.get("PGRAIN_THREADS")
    if raw is not None:
        try:
            value = int(raw)
        except ValueError:
            value = 1
        return max(1, value)
    return max(1, min(4, os.cpu_count() or 1))


def map_chunks(fn: Callable[[Sequence[T]], R], items: Sequence[T], chunk_size: int = 256) -> List[R]:
    """Apply ``fn`` to ordered chunks of ``items``, possibly in parallel.

    Returns one result per chunk, in chunk order regardless of scheduling.
    """
    chunks = [items[i:i + chunk_size] for i in range(0, len(items), chunk_size)]
    workers = max_workers()
    if workers <= 1 or len(chunks) <= 1:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))
