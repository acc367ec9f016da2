"""Deterministic random streams.

Every stochastic component draws from a Philox counter-based generator
keyed by (seed, *stream keys), so experiments replay bit-identically and
parallel sweep cases can own disjoint streams without coordination.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Return a generator for the (seed, *keys) stream.

    The same arguments always yield the same sequence; distinct key tuples
    yield statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
