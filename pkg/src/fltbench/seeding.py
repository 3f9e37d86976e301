"""Deterministic seed derivation.

One master seed drives every random decision in an experiment. Sub-streams
are derived by hashing a purpose tag plus integer keys (round index, client
id, attempt number) into a SeedSequence, so results never depend on call
order, scheduling, or worker count.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, *keys: int | str) -> int:
    """Derive a stable 63-bit sub-seed from a master seed and a key path."""
    entropy = [int(master_seed) & _MASK64]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & _MASK64)
    state = np.random.SeedSequence(entropy).generate_state(2, np.uint32)
    return (int(state[0]) << 31) | (int(state[1]) & 0x7FFFFFFF)


def rng_from(seed: int) -> np.random.Generator:
    """Generator seeded with a (possibly negative) 64-bit integer."""
    return np.random.default_rng(int(seed) & _MASK64)


def derive_rng(master_seed: int, *keys: int | str) -> np.random.Generator:
    """Generator for the sub-stream named by the key path."""
    return rng_from(derive_seed(master_seed, *keys))
