"""Seed derivation.

Every stochastic operation takes an explicit seed. Child streams are derived
from a root seed plus a path of integer or string keys, so that e.g. the
shuffle for (client 3, round 7, epoch 1) is independent of every other stream
and of the order in which streams are requested.
"""

from __future__ import annotations

import zlib

import numpy as np

Key = int | str


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(key)


def derive_seed(seed: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``seed / keys``."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, *keys)))


def child_seed(seed: int, *keys: Key) -> int:
    """A plain 63-bit integer seed for the stream ``seed / keys``."""
    return int(derive_seed(seed, *keys).generate_state(1, np.uint64)[0] >> np.uint64(1))
