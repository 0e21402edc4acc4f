"""Seed derivation and a bounded worker pool with ordered results."""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "FEDROUTE_THREADS"


def num_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, *keys); order of calls does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def pmap(fn, items, workers=None):
    """Map ``fn`` over ``items``; results come back in input order."""
    items = list(items)
    workers = num_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
