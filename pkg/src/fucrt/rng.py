"""Deterministic RNG streams keyed by (seed, purpose, ids).

Every random draw in the package goes through a stream derived from the
experiment seed plus a structural key, so results do not depend on
execution order or thread scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_ints(keys: tuple) -> list[int]:
    out = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            out.append(int(k) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(k).encode("utf-8")))
    return out


def stream(*keys) -> np.random.Generator:
    """Generator seeded by the structural key, independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(_key_ints(tuple(keys))))


def derive_seed(*keys) -> int:
    """Stable 32-bit seed derived from the structural key."""
    return int(np.random.SeedSequence(_key_ints(tuple(keys))).generate_state(1)[0])
