import logging
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger(__name__)

THREADS_ENV = "NFKAM_THREADS"


def worker_count() -> int:
    """Worker cap from NFKAM_THREADS; 1 (sequential) when unset or invalid."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring %s=%r (not an integer)", THREADS_ENV, raw)
        return 1


def ordered_map[T, R](fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Map over items, possibly concurrently; results keep the input order."""
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
