"""Seeded, splittable, counter-based random streams (Philox)."""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``.

    Streams are addressed by name, so adding a new consumer never shifts the
    draws of an existing one.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
