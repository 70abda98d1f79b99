"""Reference implementations used only by the tests.

Written without reusing package code so that agreement is evidence, not tautology.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


class RefSplitMix64:
    def __init__(self, seed: int):
        self.x = seed & MASK

    def next(self) -> int:
        self.x = (self.x + GAMMA) & MASK
        z = self.x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)


def ref_shuffle(items: list, rng: RefSplitMix64) -> list:
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = rng.next() % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def ref_sub_seed(seed: int, *tags) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(seed).encode())
    for tag in tags:
        h.update(b"\x1f" + str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def two_pass_mean(arrays: list[np.ndarray]) -> np.ndarray:
    """Sum everything in float64 first, divide once."""
    total = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        total = total + a.astype(np.float64)
    return total / len(arrays)


def incremental_mean(arrays: list[np.ndarray]) -> np.ndarray:
    """Add theta/K per input, the way a state-dict averaging loop usually does it."""
    k = len(arrays)
    avg = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        avg += a.astype(np.float64) / k
    return avg


_CODES = {np.dtype("<f4"): "F32", np.dtype("<f8"): "F64", np.dtype("<i8"): "I64"}


def hand_serialize(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> tuple[bytes, bytes]:
    """Return (header JSON bytes, data region) laid out by hand in name order."""
    header, data, offset = {}, b"", 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name]).astype(np.dtype(tensors[name].dtype).newbyteorder("<"))
        raw = arr.tobytes()
        header[name] = {"dtype": _CODES[arr.dtype], "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        data += raw
        offset += len(raw)
    if metadata:
        header["__metadata__"] = metadata
    return json.dumps(header).encode(), data


def assemble(header: bytes, data: bytes) -> bytes:
    return struct.pack("<Q", len(header)) + header + data


def ref_loss(tensors: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy for the linear or tanh-MLP model, via logsumexp."""
    h = x
    if "body.weight" in tensors:
        h = np.tanh(x @ tensors["body.weight"] + tensors["body.bias"])
    z = h @ tensors["classifier.weight"] + tensors["classifier.bias"]
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def central_differences(tensors: dict[str, np.ndarray], x, y, h: float = 1e-6) -> dict[str, np.ndarray]:
    out = {}
    for name, value in tensors.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            up = ref_loss(tensors, x, y)
            value[idx] = orig - h
            down = ref_loss(tensors, x, y)
            value[idx] = orig
            grad[idx] = (up - down) / (2 * h)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, guarded against an all-zero gradient."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)
