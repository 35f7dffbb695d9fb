"""Deterministic seed derivation.

All randomness in the package flows from one 64-bit seed.  Sub-tasks
(Monte Carlo replications, disorder draws, optimizer multi-starts) derive
their generator from the top-level seed plus an integer key path:

    rng = spawn_rng(seed, task_index)            # one level
    rng = spawn_rng(seed, draw_index, stage)     # nested

``numpy.random.SeedSequence(seed, spawn_key=path)`` implements the
derivation, so results are identical no matter how many workers run the
tasks or in which order they complete.
"""
from __future__ import annotations

import numpy as np


def spawn_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for sub-task ``path`` of the run seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


def parallel_map(fn, n_tasks: int, threads: int = 1) -> list:
    """Run ``fn(i)`` for i in range(n_tasks), returning results in task order.

    Results are independent of ``threads``; the thread pool only changes
    scheduling, never the per-task seeds or the reduction order.
    """
    if threads <= 1 or n_tasks <= 1:
        return [fn(i) for i in range(n_tasks)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_tasks)))
