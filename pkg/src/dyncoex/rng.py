"""Counter-based random streams.

Every stochastic routine in this package draws from a Philox counter-based
generator keyed by a master seed plus an integer path. Streams for distinct
paths are independent, and a stream's output never depends on how many other
streams were consumed, so results are identical under any parallel schedule.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "philox_key", "indexed_stream"]

# draws reserved per replicate index; permutations of N consume O(N) draws
DRAWS_PER_INDEX = 1 << 20


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the Philox generator for ``(seed, *path)``.

    The same ``(seed, path)`` always yields the same stream; distinct paths
    from the same seed yield statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def philox_key(seed: int, *path: int) -> np.ndarray:
    """Derive a 128-bit Philox key from a seed and a stream path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return ss.generate_state(2, np.uint64)


def indexed_stream(key: np.ndarray, index: int) -> np.random.Generator:
    """Generator positioned at a fixed counter offset for replicate ``index``.

    Cheaper than building a SeedSequence per replicate; output depends only
    on (key, index), never on how many other replicates were drawn.
    """
    bg = np.random.Philox(key=key)
    bg.advance(int(index) * DRAWS_PER_INDEX)
    return np.random.Generator(bg)
