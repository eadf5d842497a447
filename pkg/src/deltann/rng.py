"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by a base seed
and a tuple of integer stream ids, so results never depend on call order or on
how work is split across processes.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream ids must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    raise TypeError(f"unsupported stream id {part!r}")


def seed_sequence(seed, *keys):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))


def stream(seed, *keys):
    """Generator for the stream (seed, *keys). Keys may be ints or short strings."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def derive_seed(seed, *keys):
    """64-bit integer seed for a sub-task, stable across platforms."""
    lo, hi = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return (int(hi) << 32 | int(lo)) & ((1 << 63) - 1)
