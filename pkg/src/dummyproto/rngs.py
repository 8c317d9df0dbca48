"""Deterministic named RNG streams.

Every source of randomness in the package derives from one 64-bit seed
plus a stream name (and optional integer indices), so components can be
re-seeded or perturbed independently.
"""

import zlib

import numpy as np


def rng_stream(seed, name, *indices):
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
