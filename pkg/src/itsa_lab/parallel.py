"""Ordered thread-pool map with a process-wide worker cap."""

import logging
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

logger = logging.getLogger(__name__)

THREADS_ENV = "ITSA_LAB_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count(requested: int = 1) -> int:
    """Workers to use: ``requested`` capped by ``ITSA_LAB_THREADS`` if set."""
    workers = max(1, requested)
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            logger.warning(f"ignoring non-integer {THREADS_ENV}={raw!r}")
        else:
            workers = min(workers, max(1, cap))
    return workers


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Apply ``fn`` to every item; results keep the input order."""
    workers = worker_count(workers)
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
