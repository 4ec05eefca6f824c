"""Row-tiled evaluation with an optional thread pool.

Tiles are aligned to absolute row indices and results are concatenated in
tile order, so output bytes never depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

ROW_TILE = 1024


def tile_bounds(n_rows: int, tile: int = ROW_TILE):
    return [(lo, min(lo + tile, n_rows)) for lo in range(0, n_rows, tile)]


def map_rows(fn, x: np.ndarray, tile: int = ROW_TILE, workers: int = 1) -> np.ndarray:
    """Apply ``fn`` to fixed row tiles of ``x`` and stack the results."""
    bounds = tile_bounds(x.shape[0], tile)
    if not bounds:
        return fn(x)
    if workers <= 1 or len(bounds) == 1:
        parts = [fn(x[lo:hi]) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: fn(x[b[0] : b[1]]), bounds))
    return np.concatenate(parts)


def map_ordered(fn, items, workers: int = 1) -> list:
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
