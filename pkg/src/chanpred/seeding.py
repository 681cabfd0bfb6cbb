"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np

STREAMS = ("sim", "init", "shuffle", "augment", "test_noise", "perm")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; identical (seed, name) pairs give identical streams."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
