"""Small shared helpers: RNG plumbing and worker-count resolution."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "DENSFLOW_THREADS"


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept a seed, a Generator, or None and return a Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def spawn_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``n`` independent child generators off ``rng``.

    Children are a deterministic function of the parent's state, and each
    consumer owns its child outright, so per-sample work is order
    independent.
    """
    return [np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(n)]


def worker_count() -> int:
    """Worker cap: the DENSFLOW_THREADS environment variable, else cpu count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 0
        if n >= 1:
            return n
    return os.cpu_count() or 1


def map_workers(fn, items):
    """Map ``fn`` over ``items``, threading when more than one worker is allowed.

    Results keep input order. With a single worker this is a plain loop,
    which also keeps tracebacks simple.
    """
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
