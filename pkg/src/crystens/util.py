"""Small shared helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from .errors import ConfigError

_ENV_THREADS = "CRYSTENS_THREADS"

T = TypeVar("T")
U = TypeVar("U")


def worker_count() -> int:
    """Worker cap for parallel sections: CRYSTENS_THREADS, else logical cores."""
    raw = os.environ.get(_ENV_THREADS)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{_ENV_THREADS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{_ENV_THREADS} must be >= 1, got {n}")
    return n


def ordered_map(fn: Callable[[T], U], items: Iterable[T]) -> List[U]:
    """Map ``fn`` over ``items``, always returning results in input order.

    Uses a thread pool when more than one worker is allowed; ``fn`` must be
    safe to call concurrently on distinct items.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
