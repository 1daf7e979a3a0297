"""Worker-count plumbing shared by the data-parallel operators."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_workers: int | None = None


def set_workers(n: int | None) -> None:
    """Cap the number of worker threads; ``None`` falls back to ``LMPET_THREADS``."""
    global _workers
    if n is not None and n < 1:
        raise ValueError("worker count must be >= 1")
    _workers = n


def get_workers(n: int | None = None) -> int:
    if n is not None:
        return max(1, int(n))
    if _workers is not None:
        return _workers
    env = os.environ.get("LMPET_THREADS")
    if env:
        return max(1, int(env))
    return 1


def ordered_map(fn, items, workers: int | None = None) -> list:
    """Map ``fn`` over ``items`` and return results in input order."""
    items = list(items)
    w = min(get_workers(workers), max(1, len(items)))
    if w == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, items))
