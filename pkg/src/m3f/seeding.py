"""Deterministic RNG substreams derived from a root seed plus string/int labels."""

import zlib

import numpy as np


def _fold(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def substream(seed: int, *labels) -> np.random.Generator:
    """Return a Generator whose stream depends only on (seed, labels).

    Labels may be strings or ints; the same tuple always yields the same
    stream, and distinct tuples yield statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_fold(lb) for lb in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
