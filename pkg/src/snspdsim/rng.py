"""Seed derivation.

Every random draw in the pipeline comes from a generator derived from the run
seed plus a tuple of keys (stream name, class index, event index, ...). The
result depends only on the keys, never on the order in which generators are
created.
"""

from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("substream keys must be non-negative")
    return k


def substream(seed: int, *keys) -> np.random.Generator:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys) -> int:
    """A child 64-bit seed, for handing to code that takes an integer seed."""
    return int(substream(seed, *keys).integers(0, 2**63 - 1))
