"""Seeded random streams.

All randomness comes from numpy's Philox-4x64 counter-based generator.  A run
is seeded by one unsigned 64-bit integer; each purpose (parameter init, task
data, shuffling, dropout) gets its own stream keyed by ``(seed, crc32(name))``
so that drawing from one stream never shifts another.
"""

import zlib

import numpy as np

STREAMS = ("init", "data", "data-train", "data-test", "shuffle", "dropout", "bench", "verify")


def stream(seed: int, name: str) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(key))
