"""Seed derivation.

Every random stream in the package is a numpy ``Generator`` over PCG64 seeded
through ``SeedSequence``. Streams for sub-tasks (epoch, example, fold, ...)
are derived by hashing the base seed together with integer keys, so a result
never depends on how many workers ran or in which order they were scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64 via numpy SeedSequence"


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; string keys are CRC32-hashed."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return derive_rng(int(rng))
