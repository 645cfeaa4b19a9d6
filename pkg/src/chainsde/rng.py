"""Hierarchical, counter-based random streams.

A stream is addressed by ``(seed, *key)``; the key is hashed into a
``SeedSequence`` spawn key and drives a Philox-4x64 generator (2**128
counter space per key, 2**256 distinct keys). The stream for a given
address never depends on how many other streams were created before it,
so results are independent of chunking and worker count.
"""

import numpy as np

# stream purposes, used as the last key element
CHAIN = 0
RESTART = 1
PICARD_INIT = 2
PICARD_NOISE = 3
PICARD_PERM = 4
FILTER = 5
FILTER_RESAMPLE = 6
OBSERVATION = 7
REPLICATION = 8

_MASK64 = (1 << 64) - 1


def stream(seed, *key):
    """Return a fresh ``numpy.random.Generator`` for the address ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed, *key):
    """Derive a 64-bit integer seed for a sub-experiment."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
