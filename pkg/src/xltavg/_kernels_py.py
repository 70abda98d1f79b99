"""Pure-Python/numpy versions of the kernels in ``_kernels.pyx``.

Every function here must produce bit-identical results to its compiled twin.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64_fill(state: int, out: np.ndarray) -> int:
    n = out.shape[0]
    if n == 0:
        return state
    # SplitMix64 is counter based: the i-th output only depends on state + (i+1)*GAMMA.
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        counters = np.uint64(state) + steps * np.uint64(GAMMA)
    out[:] = _mix_array(counters)
    return (state + n * GAMMA) & MASK64


def fisher_yates(items: np.ndarray, state: int) -> int:
    n = items.shape[0]
    if n < 2:
        return state
    draws = np.empty(n - 1, dtype=np.uint64)
    state = splitmix64_fill(state, draws)
    bounds = np.arange(n, 1, -1, dtype=np.uint64)
    picks = (draws % bounds).tolist()
    buf = items.tolist()
    for i, j in zip(range(n - 1, 0, -1), picks):
        buf[i], buf[j] = buf[j], buf[i]
    items[:] = buf
    return state


def accumulate(acc: np.ndarray, x: np.ndarray) -> None:
    if x.shape[0] != acc.shape[0]:
        raise ValueError(f"length mismatch: {acc.shape[0]} vs {x.shape[0]}")
    acc += x
