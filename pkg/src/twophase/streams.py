"""Seeded random streams.

Every run owns one ``numpy.random.Generator`` backed by PCG64. Independent
sub-streams (per seed of a sweep, per check of a suite) are derived through
``SeedSequence`` so that results do not depend on execution order.
"""

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic 64-bit child seed of ``base`` for the integer path ``keys``."""
    ss = np.random.SeedSequence(int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
