"""Named random sub-streams derived from a single integer seed."""
from __future__ import annotations

import random
import zlib

import numpy as np


def np_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def py_stream(seed: int, name: str) -> random.Random:
    # str seeding goes through sha512, so it is stable across processes
    return random.Random(f"{int(seed)}:{name}")


def as_random(rng: int | random.Random, name: str = "default") -> random.Random:
    if isinstance(rng, random.Random):
        return rng
    return py_stream(rng, name)
