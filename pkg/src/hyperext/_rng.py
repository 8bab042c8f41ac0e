"""Named random substreams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int | np.random.Generator, name: str) -> np.random.Generator:
    """Generator for the stream `name`; independent of every other name."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
