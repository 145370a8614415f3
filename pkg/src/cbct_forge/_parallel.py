"""Worker-count control shared by the numba kernels."""
from __future__ import annotations

import os

import numba

# OpenMP first: the TBB layer refuses old TBB builds with a warning on every import.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

THREADS_ENV = "CBCT_FORGE_THREADS"


def set_threads(n: int | None = None) -> int:
    """Cap numba worker threads at ``n`` (or ``$CBCT_FORGE_THREADS``).

    Returns the number actually in effect. Kernels never share accumulators
    across threads, so results do not depend on this setting.
    """
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return numba.get_num_threads()
        n = int(env)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
