"""Index-parallel map over forked worker processes.

Tasks are addressed by integer index only, so results never depend on the
worker count: each index owns its own noise stream and the caller reduces
the returned list in index order.
"""

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

_TASK = None


def _call(i):
    return _TASK(i)


def default_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def parallel_map(task, n_items, workers=1):
    global _TASK
    if workers is None:
        workers = default_workers()
    if workers <= 1 or n_items <= 1:
        return [task(i) for i in range(n_items)]
    _TASK = task
    try:
        ctx = mp.get_context("fork")
        chunk = max(1, n_items // (8 * workers))
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_call, range(n_items), chunksize=chunk))
    finally:
        _TASK = None
