"""Counter-based uniform generator (splitmix64), keyed by seed, stream and ray id.

Every draw is a pure function of its key, so samples do not depend on
batch composition, chunking or worker count.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def key(*parts: int) -> np.uint64:
    """Fold integers into one 64-bit key."""
    h = np.uint64(0)
    for p in parts:
        h = splitmix64(h ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF))
    return h


def uniforms(seed_key: np.uint64, ids: np.ndarray, n: int) -> np.ndarray:
    """``(len(ids), n)`` float64 uniforms in ``[0, 1)``."""
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1, 1)
    with np.errstate(over="ignore"):
        base = splitmix64(ids ^ np.uint64(seed_key))
        counters = base * np.uint64(0x100000001B3) + np.arange(n, dtype=np.uint64)[None, :]
    bits = splitmix64(counters) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / 9007199254740992.0)
