"""Named random streams derived from one master seed.

Each purpose (init, noise, binarization, shuffle, eval ...) gets its own
stream so toggling one feature never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = {"init": 0, "noise": 1, "binarize": 2, "shuffle": 3, "eval": 4, "log_p_w": 5, "generate": 6, "dropout": 7}


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[purpose], *(int(k) for k in keys)))
    return np.random.Generator(np.random.PCG64(ss))


def content_key(arr: np.ndarray) -> int:
    """Stable integer key for an array's bytes (used to key per-value streams)."""
    return zlib.crc32(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
