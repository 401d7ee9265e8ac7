"""Named random substreams.

Every consumer of randomness asks for a generator by a path of names and
integers under a 64-bit base seed, e.g. ``substream(seed, "instrument")`` or
``substream(seed, "replication", 3)``. Streams are PCG64 generators seeded by
``numpy.random.SeedSequence(seed, spawn_key=path)`` where string components are
mapped to integers with CRC-32, so adding a new consumer never shifts the
numbers another consumer sees.
"""

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    raise TypeError(f"substream path parts must be str or non-negative int, got {part!r}")


def seed_sequence(seed, *path):
    return np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=tuple(_key(p) for p in path))


def substream(seed, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))


def derive_seed(seed, *path) -> int:
    """A child 64-bit seed, for handing to components that take an integer."""
    state = seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
