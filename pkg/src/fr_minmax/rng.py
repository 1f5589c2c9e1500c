"""Named counter-based random streams.

Every consumer of randomness asks for a stream by name, so adding a new
consumer never shifts the draws seen by an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))
