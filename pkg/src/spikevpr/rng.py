"""Counter-based uniform variates.

Each variate is a pure function of ``(seed, *counters)``, so values do not
depend on how many draws happened before or on traversal order. The mixing
function is the splitmix64 finalizer applied to a chained key.
"""

from __future__ import annotations

import zlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def hash_counters(seed: int, *counters) -> np.ndarray:
    """64-bit hash of ``seed`` and broadcastable integer counter arrays."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        for c in counters:
            c = np.asarray(c).astype(np.uint64)
            h = _mix(h ^ (c + _GOLDEN + (h << np.uint64(6)) + (h >> np.uint64(2))))
    return h


def uniform(seed: int, *counters) -> np.ndarray:
    """Uniform [0, 1) doubles keyed by ``(seed, *counters)``; 53 bits of resolution."""
    return (hash_counters(seed, *counters) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(root: int, label: str) -> int:
    """Fan a root seed out to a named component."""
    return int(hash_counters(root, zlib.crc32(label.encode())) & np.uint64(0x7FFFFFFFFFFFFFFF))
