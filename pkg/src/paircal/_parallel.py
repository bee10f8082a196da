import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "PAIRCAL_THREADS"


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def map_ordered(func, items, workers: int | None = None) -> list:
    """``list(map(func, items))``, possibly on threads; result order is the input order."""
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) <= 1:
        return [func(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(func, items))
