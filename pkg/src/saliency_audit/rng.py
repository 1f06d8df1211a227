"""Counter-based random streams.

Every random draw is keyed by (root seed, stream name, counters), so results
do not depend on the order in which samples are processed.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(name.encode())] + [int(c) for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
