"""Thread-pool map with deterministic, input-ordered results.

Worker count comes from the VISTA_THREADS env var (or an explicit argument);
results are collected by input index, so output is independent of scheduling.
Threads suffice because the heavy kernels are numpy/scipy calls that release
the GIL.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(explicit: int | None = None) -> int:
    if explicit and explicit > 0:
        return explicit
    env = os.environ.get("VISTA_THREADS", "")
    if env.strip():
        try:
            n = int(env)
            if n > 0:
                return n
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)


def ordered_map(fn, items, workers: int | None = None) -> list:
    """Map fn over items, preserving input order in the result list."""
    items = list(items)
    n = worker_count(workers)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
