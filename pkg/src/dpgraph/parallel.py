"""Thread-pool helper honoring the DPGRAPH_THREADS environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
U = TypeVar("U")

_ENV_VAR = "DPGRAPH_THREADS"


def thread_count() -> int:
    """Worker-thread cap from DPGRAPH_THREADS (default 1, i.e. serial)."""
    raw = os.environ.get(_ENV_VAR, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn: Callable[[T], U], items: Sequence[T]) -> list[U]:
    """Map preserving input order; uses a thread pool when allowed.

    Results are identical to serial execution for any worker count: outputs
    are collected positionally and every fn call must be pure or draw only
    from keyed (order-independent) random streams.
    """
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
