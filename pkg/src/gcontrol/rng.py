"""Seed-keyed random substreams.

Every stochastic routine draws from a Philox counter stream keyed by
(seed, purpose). Purposes are fixed small integers, so a run is
reproducible bit for bit and adding draws for one purpose never shifts
the draws of another. Counter-based generation also makes parallel use
order-independent: the draws depend only on the key, not on how work is
scheduled.
"""

from __future__ import annotations

import numpy as np

BROWNIAN = 1
JUMPS = 2
TAGS = 3
SCENARIOS = 4
PROBES = 5


def substream(seed: int, purpose: int) -> np.random.Generator:
    """Return the generator for one (seed, purpose) pair."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = np.array([seed, int(purpose)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
