"""Counter-based random streams keyed by (seed, purpose, index).

Every consumer of randomness asks for its own stream, so adding a new
consumer (or running trajectories in a different order) never shifts the
numbers another consumer sees.
"""
import zlib

import numpy as np


def _tag_key(tag):
    return zlib.crc32(str(tag).encode("utf-8")) & 0xFFFFFFFF


def substream(seed, tag="", index=0):
    """Return a Philox-backed Generator for the given purpose tag and index."""
    if seed is None:
        raise ValueError("seed is mandatory")
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(_tag_key(tag), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng, tag="default"):
    """Coerce an int seed, a Generator or None into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return substream(0, tag)
    return substream(int(rng), tag)
