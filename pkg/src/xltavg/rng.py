"""SplitMix64 generator and Fisher-Yates shuffling.

All randomness in the package flows through :class:`SplitMix64` so that a seed
fully determines every shuffle, initialization and data draw.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from xltavg import kernels

MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def derive_seed(seed: int, *tags: object) -> int:
    """Stable 64-bit sub-seed for ``seed`` and a path of tags (e.g. a language code)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class SplitMix64:
    """The SplitMix64 generator (Steele, Lea & Flood).

    ``state`` is the 64-bit counter; each draw adds the golden-ratio increment
    and returns the mixed counter.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @classmethod
    def derived(cls, seed: int, *tags: object) -> "SplitMix64":
        return cls(derive_seed(seed, *tags))

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        self.state = int(kernels.splitmix64_fill(self.state, out))
        return int(out[0])

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        self.state = int(kernels.splitmix64_fill(self.state, out))
        return out

    def below(self, bound: int) -> int:
        """Integer in ``[0, bound)`` by modulo reduction (bias < 2**-50 for small bounds)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Doubles in ``[low, high)`` from the top 53 bits of each draw."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws by the Box-Muller transform, two per pair of uniforms."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        bits = self.u64(2 * pairs) >> np.uint64(11)
        # shift u1 into (0, 1] so log() stays finite
        u1 = (bits[0::2].astype(np.float64) + 1.0) * _INV_2_53
        u2 = bits[1::2].astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(_TWO_PI * u2)
        z[1::2] = radius * np.sin(_TWO_PI * u2)
        return z[:n].reshape(shape)

    def shuffle(self, items: np.ndarray) -> None:
        """Fisher-Yates shuffle of a 1-D int64 array, in place."""
        if items.dtype != np.int64 or items.ndim != 1 or not items.flags.c_contiguous:
            raise TypeError("shuffle expects a contiguous 1-D int64 array")
        self.state = int(kernels.fisher_yates(items, self.state))

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(int(n), dtype=np.int64)
        self.shuffle(perm)
        return perm
