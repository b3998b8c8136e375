"""Named, counter-based random streams.

Every stochastic draw in an experiment comes from ``stream(seed, *names)``:
a Philox generator keyed by the experiment seed and a stream path such as
``("obs", 17)``. The same (seed, path) always yields the same sequence, no
matter which process or in which order streams are opened.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("stream ids must be non-negative")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))
