"""Named, seed-derived random streams.

Every source of randomness in a run derives from one top-level seed plus a
stream name, so sub-results (data, noise, init, shuffle) stay reproducible
independently of each other and of how work is split across workers.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name), *[int(e) for e in extra]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
