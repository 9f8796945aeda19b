"""Deterministic fan-out over independent work blocks."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def map_blocks(fn, blocks, jobs=1):
    """``[fn(b) for b in blocks]``, optionally in worker processes.

    Results come back in block order, so reductions over them do not depend
    on ``jobs``.
    """
    blocks = list(blocks)
    if jobs is None or jobs <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(fn, blocks))


def seed_blocks(n, block_size):
    """Split ``range(n)`` into consecutive ``(start, stop)`` pairs."""
    return [(i, min(i + block_size, n)) for i in range(0, n, block_size)]
