"""Bounded internal parallelism, capped by PROMPTMATTE_THREADS."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    """Worker cap from PROMPTMATTE_THREADS; defaults to machine parallelism."""
    env = os.environ.get("PROMPTMATTE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    """Ordered map over items, threaded when more than one worker is allowed."""
    items = list(items)
    workers = min(worker_count(), len(items)) if items else 1
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
