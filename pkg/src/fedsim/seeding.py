"""Deterministic RNG derivation.

Every random decision in a run is drawn from a generator derived from the
master seed plus a structural key (stream id, round, client position...),
never from call order, so results do not depend on scheduling or worker
count.
"""

from __future__ import annotations

import numpy as np

# stream ids
INIT = 0
POOL = 1
PARTITION = 2
FOLDS = 3
LOCAL = 4
SHIFT = 5


def rng_from(seed: int, *key: int) -> np.random.Generator:
    """Generator for (seed, key...); identical inputs give identical streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
