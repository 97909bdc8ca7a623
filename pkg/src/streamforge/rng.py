"""Named random substreams derived from one master seed."""

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``.

    Names are hashed with CRC32 so the mapping is stable across processes
    and Python versions (``hash()`` is salted per process).
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            key.append(int(name) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
