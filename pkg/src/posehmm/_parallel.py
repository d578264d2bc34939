import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "POSEHMM_THREADS"


def resolve_threads(n=None):
    if n is None:
        n = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(n))


def parallel_map(fn, items, n_threads=1):
    """Ordered map; results are assembled in input order for any worker count."""
    items = list(items)
    if n_threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))
