"""Named-tensor checkpoint files in the safetensors layout.

File layout::

    [u64 little-endian N][N bytes of UTF-8 JSON header][data region]

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
(offsets relative to the data region) plus an optional ``"__metadata__"``
object of string pairs. Tensors are written contiguously in lexicographic
name order, little-endian.
"""
from __future__ import annotations

import enum
import json
import math
import mmap
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

METADATA_KEY = "__metadata__"
# refuse absurd headers before trying to allocate them
MAX_HEADER_BYTES = 100 * 1024 * 1024


class CheckpointError(ValueError):
    """Base class for every checkpoint validation failure."""


class HeaderError(CheckpointError):
    """The header is not a well-formed tensor table."""


class OverlapError(HeaderError):
    """Two tensors claim overlapping byte ranges."""


class TruncatedFileError(HeaderError):
    """The file ends before the header or a tensor payload does."""


class SpecViolationError(CheckpointError):
    """An in-memory checkpoint breaks a tensor invariant (bad dtype, duplicate name...)."""


class UnknownTensorError(CheckpointError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class Dtype(enum.Enum):
    F32 = "F32"
    F64 = "F64"
    I64 = "I64"

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY[self]

    @property
    def width(self) -> int:
        return _NUMPY[self].itemsize

    @property
    def is_floating(self) -> bool:
        return self is not Dtype.I64

    @classmethod
    def of(cls, array: np.ndarray) -> "Dtype":
        key = (array.dtype.kind, array.dtype.itemsize)
        if key == ("f", 4):
            return cls.F32
        if key == ("f", 8):
            return cls.F64
        if key == ("i", 8):
            return cls.I64
        raise SpecViolationError(f"unsupported dtype {array.dtype}; expected float32, float64 or int64")


_NUMPY = {
    Dtype.F32: np.dtype("<f4"),
    Dtype.F64: np.dtype("<f8"),
    Dtype.I64: np.dtype("<i8"),
}


@dataclass(frozen=True)
class TensorSpec:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.width

    def schema(self) -> tuple[Dtype, tuple[int, ...]]:
        return self.dtype, self.shape


@dataclass
class Checkpoint:
    """In-memory checkpoint: tensor name -> array, iterated in lexicographic order.

    A checkpoint also serves as its own reader (``specs``/``read_tensor``), so
    it can be passed anywhere a :class:`CheckpointRef` is accepted.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tensors = {name: self.tensors[name] for name in sorted(self.tensors)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def specs(self) -> dict[str, TensorSpec]:
        return _layout(self.tensors)

    def read_tensor(self, name: str) -> tuple[TensorSpec, np.ndarray]:
        if name not in self.tensors:
            raise UnknownTensorError(f"no tensor named {name!r}")
        return self.specs[name], self.tensors[name]

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of names, dtypes, shapes and payloads."""
        if self.names() != other.names():
            return False
        for name in self.tensors:
            a, b = self.tensors[name], other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def _validate_name(name: object) -> str:
    if not isinstance(name, str) or not name:
        raise SpecViolationError(f"tensor names must be non-empty strings, got {name!r}")
    if name == METADATA_KEY:
        raise SpecViolationError(f"{METADATA_KEY!r} is reserved")
    return name


def _layout(tensors: Mapping[str, np.ndarray]) -> dict[str, TensorSpec]:
    specs: dict[str, TensorSpec] = {}
    offset = 0
    for name in sorted(tensors):
        _validate_name(name)
        array = np.asarray(tensors[name])
        dtype = Dtype.of(array)
        shape = tuple(int(s) for s in array.shape)
        end = offset + math.prod(shape) * dtype.width
        specs[name] = TensorSpec(name, dtype, shape, (offset, end))
        offset = end
    return specs


def checkpoint_from_items(items, metadata: Mapping[str, str] | None = None) -> Checkpoint:
    """Build a checkpoint from (name, array) pairs, rejecting duplicate names."""
    tensors: dict[str, np.ndarray] = {}
    for name, array in items:
        _validate_name(name)
        if name in tensors:
            raise SpecViolationError(f"duplicate tensor name {name!r}")
        tensors[name] = np.asarray(array)
    return Checkpoint(tensors, dict(metadata or {}))


def encode_checkpoint(cp: Checkpoint) -> bytes:
    """Serialize to the exact file bytes that :func:`write_checkpoint` emits."""
    specs = _layout(cp.tensors)
    header: dict[str, object] = {}
    if cp.metadata:
        for k, v in cp.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise SpecViolationError("metadata must map strings to strings")
        header[METADATA_KEY] = dict(sorted(cp.metadata.items()))
    for name, spec in specs.items():
        header[name] = {
            "dtype": spec.dtype.value,
            "shape": list(spec.shape),
            "data_offsets": list(spec.byte_range),
        }
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad to 8 bytes with spaces so the data region stays aligned
    raw += b" " * (-len(raw) % 8)
    parts = [struct.pack("<Q", len(raw)), raw]
    for name, spec in specs.items():
        array = np.asarray(cp.tensors[name])
        parts.append(np.ascontiguousarray(array, dtype=spec.dtype.numpy).tobytes())
    return b"".join(parts)


def write_checkpoint(cp: Checkpoint, destination: str | os.PathLike) -> None:
    data = encode_checkpoint(cp)
    tmp = f"{os.fspath(destination)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, destination)


def _parse_header(raw: bytes, data_len: int) -> tuple[dict[str, TensorSpec], dict[str, str]]:
    def no_duplicates(pairs):
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            dup = next(k for k in keys if keys.count(k) > 1)
            raise HeaderError(f"duplicate key {dup!r} in header")
        return dict(pairs)

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise HeaderError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise HeaderError(f"{METADATA_KEY} must map strings to strings")

    specs: dict[str, TensorSpec] = {}
    for name, entry in header.items():
        if not name:
            raise HeaderError("empty tensor name")
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise HeaderError(f"{name!r}: entry must have exactly dtype, shape, data_offsets")
        try:
            dtype = Dtype(entry["dtype"])
        except (ValueError, TypeError):
            raise HeaderError(f"{name!r}: unsupported dtype {entry['dtype']!r}") from None
        shape, offsets = entry["shape"], entry["data_offsets"]
        if not isinstance(shape, list) or not all(
            type(s) is int and s >= 0 for s in shape
        ):
            raise HeaderError(f"{name!r}: shape must be a list of non-negative integers")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(type(o) is int and o >= 0 for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise HeaderError(f"{name!r}: data_offsets must be [begin, end] with 0 <= begin <= end")
        spec = TensorSpec(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        if offsets[1] - offsets[0] != spec.nbytes:
            raise HeaderError(
                f"{name!r}: byte range holds {offsets[1] - offsets[0]} bytes, "
                f"shape and dtype need {spec.nbytes}"
            )
        specs[name] = spec

    cursor = 0
    for spec in sorted(specs.values(), key=lambda s: (s.byte_range, s.name)):
        begin, end = spec.byte_range
        if begin < cursor:
            raise OverlapError(f"{spec.name!r}: byte range {spec.byte_range} overlaps a previous tensor")
        if begin > cursor:
            raise HeaderError(f"{spec.name!r}: gap before byte {begin}; tensors must be contiguous")
        if end > data_len:
            raise TruncatedFileError(
                f"{spec.name!r}: byte range ends at {end}, data region has {data_len} bytes"
            )
        cursor = end
    if cursor != data_len:
        raise HeaderError(f"{data_len - cursor} trailing bytes after the last tensor")
    return {name: specs[name] for name in sorted(specs)}, dict(metadata)


class CheckpointRef:
    """A parsed, validated checkpoint whose tensor payloads are read on demand.

    Backed by a read-only memory map (files) or a bytes object (in-memory
    handles); the header is validated on construction and the object is
    immutable afterwards.
    """

    def __init__(self, buffer, source: str, specs: dict[str, TensorSpec],
                 metadata: dict[str, str], data_start: int):
        self._buffer = buffer
        self.source = source
        self.specs = specs
        self.metadata = metadata
        self._data_start = data_start

    @classmethod
    def from_buffer(cls, buffer, source: str = "<memory>") -> "CheckpointRef":
        size = len(buffer)
        if size < 8:
            raise TruncatedFileError(f"{source}: {size} bytes, too short for the length prefix")
        (header_len,) = struct.unpack("<Q", bytes(buffer[:8]))
        if header_len > MAX_HEADER_BYTES:
            raise HeaderError(f"{source}: header length {header_len} exceeds limit")
        if 8 + header_len > size:
            raise TruncatedFileError(f"{source}: header claims {header_len} bytes, file has {size - 8}")
        specs, metadata = _parse_header(bytes(buffer[8:8 + header_len]), size - 8 - header_len)
        return cls(buffer, source, specs, metadata, 8 + header_len)

    def names(self) -> list[str]:
        return list(self.specs)

    def read_tensor(self, name: str) -> tuple[TensorSpec, np.ndarray]:
        try:
            spec = self.specs[name]
        except KeyError:
            raise UnknownTensorError(f"{self.source}: no tensor named {name!r}") from None
        begin, end = spec.byte_range
        raw = self._buffer[self._data_start + begin:self._data_start + end]
        array = np.frombuffer(raw, dtype=spec.dtype.numpy).reshape(spec.shape)
        return spec, array.astype(spec.dtype.numpy.newbyteorder("="), copy=True)

    def load(self) -> Checkpoint:
        return Checkpoint({name: self.read_tensor(name)[1] for name in self.specs}, dict(self.metadata))

    def close(self) -> None:
        if isinstance(self._buffer, mmap.mmap):
            self._buffer.close()

    def __enter__(self) -> "CheckpointRef":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"CheckpointRef({self.source!r}, {len(self.specs)} tensors)"


def open_checkpoint(path: str | os.PathLike) -> CheckpointRef:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        # mmap cannot map empty files
        buffer = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) if size else b""
    try:
        return CheckpointRef.from_buffer(buffer, source=path)
    except CheckpointError:
        if isinstance(buffer, mmap.mmap):
            buffer.close()
        raise


def read_tensor(ref: CheckpointRef | Checkpoint, name: str) -> tuple[TensorSpec, np.ndarray]:
    return ref.read_tensor(name)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open_checkpoint(path) as ref:
        return ref.load()
