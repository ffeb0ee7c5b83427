"""Reproducible random streams.

Every stream is a Philox generator keyed by ``(seed, replication, purpose)``
through ``SeedSequence`` spawn keys, so streams never overlap and do not
depend on scheduling order or thread count.
"""

from __future__ import annotations

import numpy as np

# purposes
SAMPLER = 0
IDIOSYNCRATIC = 1
FIXED = 2
PILOT = 3


def stream(seed: int, replication: int = 0, purpose: int = SAMPLER) -> np.random.Generator:
    """Generator for ``(seed, replication, purpose)``; a pure function of its arguments."""
    if seed < 0 or replication < 0 or purpose < 0:
        raise ValueError("seed, replication and purpose must be nonnegative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replication), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))

