"""Order-fixed chunked execution.

Work is split into fixed-size chunks whose boundaries do not depend on the
number of workers, and results are concatenated in chunk order, so output is
bit-identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

DEFAULT_CHUNK = 1000


def chunk_bounds(n: int, chunk: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


def map_chunks(fn: Callable[[np.ndarray], object], items: Sequence[int] | np.ndarray, threads: int = 1,
               chunk: int = DEFAULT_CHUNK) -> list:
    """Apply ``fn`` to consecutive slices of ``items``; results come back in slice order."""
    items = np.asarray(items)
    slices = [items[a:b] for a, b in chunk_bounds(len(items), chunk)]
    if threads <= 1 or len(slices) <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, slices))


def concat_chunks(fn, items, threads: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    parts = map_chunks(fn, items, threads, chunk)
    return np.concatenate(parts) if parts else np.zeros(0)
