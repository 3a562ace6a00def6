"""Named random substreams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream_seed(seed: int, *names) -> int:
    key = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0] >> 1)


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; same arguments give the same stream."""
    return np.random.default_rng(substream_seed(seed, *names))
