"""Deterministic random streams derived from one master seed.

Every source of randomness in the project (data generation, weight init,
training batches, sampling noise) pulls from a named substream so that runs
are reproducible and independent stages never share a stream.
"""

import zlib

import numpy as np


def substream(master_seed, *names):
    """Return a Generator for the substream identified by `names`.

    Names may be strings or ints. The mapping is stable across processes
    (no use of Python's salted hash).
    """
    key = []
    for name in names:
        if isinstance(name, int):
            key.append(name & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(key))
    return np.random.default_rng(ss)
