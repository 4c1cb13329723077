"""Named child seeds split off one root seed, so each consumer has an independent stream."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, *keys) -> int:
    words = [int(root) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def numpy_rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
