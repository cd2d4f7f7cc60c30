"""Named random substreams derived from a single experiment seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; the same (seed, name) always gives the same stream."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def torch_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**31 - 1))
