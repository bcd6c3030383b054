"""Named random streams derived from one 64-bit seed."""

import zlib

import numpy as np


def named_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stream ``name`` (e.g. "data", "init").

    Streams with different names never share state, so adding draws to one
    cannot shift another.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32, zlib.crc32(name.encode("utf-8"))]
    words.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(words))
