"""Deterministic blockwise reductions with optional thread workers.

Reductions over the path axis are computed per fixed-size block and the
block partials are combined in index order.  The result is therefore
bit-identical for any worker count: the block boundaries depend only on
the number of paths, never on the number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 4096

_default_jobs = None


def set_default_jobs(jobs):
    global _default_jobs
    _default_jobs = None if jobs is None else max(1, int(jobs))


def get_default_jobs() -> int:
    if _default_jobs is not None:
        return _default_jobs
    env = os.environ.get("BSDELAB_JOBS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _block_slices(n):
    return [slice(i, min(i + BLOCK, n)) for i in range(0, n, BLOCK)]


def map_blocks(fn, n, jobs=None):
    """Apply ``fn(slice)`` per path block; return partials in index order."""
    slices = _block_slices(n)
    jobs = get_default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, slices))


def block_sum(values, jobs=None):
    """Sum over axis 0 with a fixed-order pairwise block reduction."""
    values = np.asarray(values)
    partials = map_blocks(lambda s: np.add.reduce(values[s], axis=0), values.shape[0], jobs)
    return np.add.reduce(np.stack(partials, axis=0), axis=0)


def mean_and_se(samples, jobs=None):
    """Monte Carlo mean with its standard error, block-deterministically."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    s1 = block_sum(samples, jobs)
    s2 = block_sum(samples * samples, jobs)
    mean = s1 / n
    if n > 1:
        var = max(float(s2 - n * mean * mean) / (n - 1), 0.0)
        se = float(np.sqrt(var / n))
    else:
        se = float("inf")
    return float(mean), se
