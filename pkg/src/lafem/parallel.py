"""Worker-count control shared by assembly and the command line."""
import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "LAFEM_NUM_THREADS"

_num_threads = None


def num_threads():
    if _num_threads is not None:
        return _num_threads
    try:
        return max(1, int(os.environ.get(ENV_VAR, "1")))
    except ValueError:
        return 1


def set_num_threads(n):
    global _num_threads
    _num_threads = None if n is None else max(1, int(n))


def thread_map(fn, items):
    """Ordered map; runs on a thread pool when more than one worker is allowed."""
    items = list(items)
    n = min(num_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
