import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    """Worker threads to use; capped by the ``FIBRA_THREADS`` variable."""
    n = os.cpu_count() or 1
    cap = os.environ.get("FIBRA_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def map_ordered(fn, items):
    """``list(map(fn, items))`` on a thread pool; results keep input order."""
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def slab_bounds(length: int, step: int):
    return [(s, min(s + step, length)) for s in range(0, length, step)]
