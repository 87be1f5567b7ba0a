"""Deterministic random streams.

All randomness in the package flows through counter-based Philox generators so
that results are reproducible across platforms and independent of thread
scheduling.
"""

from __future__ import annotations

import numpy as np

_U53 = 1 << 53


def generator(seed: int) -> np.random.Generator:
    """Counter-based generator for a given seed."""
    return np.random.Generator(np.random.Philox(key=seed))


def uniform_open(n: int, seed: int) -> np.ndarray:
    """n uniforms strictly inside (0, 1), deterministic in seed.

    Built as (k + 0.5) / 2^53 from 53-bit counters, so 0 and 1 are never hit
    and the stream is symmetric about 0.5.
    """
    k = generator(seed).integers(0, _U53, size=n, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) / _U53
