"""Load, validate, and save named-tensor checkpoint archives.

Container layout (read and write): an 8-byte little-endian unsigned header
length N, followed by N bytes of JSON mapping tensor name ->
{"dtype", "shape", "data_offsets": [begin, end]}, followed by the raw
little-endian tensor payload. Offsets are relative to the payload start and
must tile it contiguously. This is the safetensors container layout, so
archives interoperate with existing checkpoint tooling.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    IncompatibleShapes,
    IoError,
    MalformedHeader,
    NonFiniteValue,
    TruncatedFile,
    UnsupportedDtype,
)

__all__ = [
    "TensorMeta",
    "TensorMap",
    "CompatReport",
    "load_archive",
    "load_archive_bytes",
    "save_archive",
    "dump_archive_bytes",
    "check_compatibility",
    "ensure_compatible",
]

_DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name or "\x00" in name:
        raise ValueError(f"invalid tensor name: {name!r}")


def _element_count(shape: Sequence[int]) -> int:
    return math.prod(shape)


@dataclass(frozen=True)
class TensorMeta:
    """Header entry for one tensor: where its bytes live and how to decode them."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int

    @property
    def element_count(self) -> int:
        return _element_count(self.shape)


class TensorMap:
    """Immutable ordered mapping from tensor name to a float32 buffer.

    Keys are kept in lexicographic order regardless of insertion order, and
    buffers are marked read-only, so instances are safe to share across
    threads without copying.
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        items: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            _check_name(name)
            arr = np.asarray(tensors[name], dtype=np.float32, order="C")
            if arr is tensors[name] or not arr.flags.c_contiguous:
                arr = arr.copy(order="C")
            arr.flags.writeable = False
            items[name] = arr
        self._tensors = items

    @classmethod
    def _from_trusted(cls, tensors: dict[str, np.ndarray]) -> "TensorMap":
        # Internal fast path: keys already sorted, arrays freshly allocated
        # float32 and not aliased elsewhere.
        obj = cls.__new__(cls)
        for arr in tensors.values():
            arr.flags.writeable = False
        obj._tensors = tensors
        return obj

    def keys(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._tensors.items()}

    def subset(self, names: Sequence[str]) -> "TensorMap":
        missing = [n for n in names if n not in self._tensors]
        if missing:
            raise KeyError(f"tensors not present: {missing}")
        picked = {n: self._tensors[n] for n in sorted(names)}
        obj = TensorMap.__new__(TensorMap)
        obj._tensors = picked
        return obj

    def concat(self) -> np.ndarray:
        """All buffers flattened row-major and concatenated in key order."""
        if not self._tensors:
            return np.empty(0, dtype=np.float32)
        return np.concatenate([arr.ravel() for arr in self._tensors.values()])

    @property
    def total_elements(self) -> int:
        return sum(arr.size for arr in self._tensors.values())

    def equal(self, other: "TensorMap") -> bool:
        """Bit-exact comparison of keys, shapes, and buffers."""
        if self.keys() != other.keys():
            return False
        for name, arr in self._tensors.items():
            brr = other._tensors[name]
            if arr.shape != brr.shape or arr.tobytes() != brr.tobytes():
                return False
        return True

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        return self.equal(other)

    __hash__ = None

    def __repr__(self) -> str:
        return f"TensorMap({len(self._tensors)} tensors, {self.total_elements} scalars)"


def _parse_header(raw: bytes) -> list[TensorMeta]:
    def reject_duplicates(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise MalformedHeader(f"duplicate tensor name in header: {key!r}")
            seen.add(key)
        return dict(pairs)

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metas: list[TensorMeta] = []
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        if not name or "\x00" in name:
            raise MalformedHeader(f"invalid tensor name: {name!r}")
        if not isinstance(entry, dict):
            raise MalformedHeader(f"entry for {name!r} must be an object")
        dtype = entry.get("dtype")
        if not isinstance(dtype, str):
            raise MalformedHeader(f"missing dtype for {name!r}")
        if dtype not in _DTYPE_SIZES:
            raise UnsupportedDtype(f"tensor {name!r} has unsupported dtype {dtype!r}")
        shape = entry.get("shape")
        if not isinstance(shape, list) or any(
            not isinstance(d, int) or isinstance(d, bool) or d < 0 for d in shape
        ):
            raise MalformedHeader(f"bad shape for {name!r}: {shape!r}")
        offsets = entry.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(not isinstance(o, int) or isinstance(o, bool) or o < 0 for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise MalformedHeader(f"bad data_offsets for {name!r}: {offsets!r}")
        begin, end = offsets
        expected = _element_count(shape) * _DTYPE_SIZES[dtype]
        if end - begin != expected:
            raise MalformedHeader(
                f"tensor {name!r}: byte length {end - begin} disagrees with "
                f"shape {shape} and dtype {dtype} (expected {expected})"
            )
        metas.append(TensorMeta(name, dtype, tuple(shape), begin, end - begin))
    return metas


def _check_offsets(metas: Sequence[TensorMeta], payload_size: int) -> None:
    cursor = 0
    for meta in sorted(metas, key=lambda m: (m.byte_offset, m.byte_offset + m.byte_length)):
        begin = meta.byte_offset
        end = begin + meta.byte_length
        if begin < cursor:
            raise MalformedHeader(f"tensor {meta.name!r} overlaps the previous tensor")
        if begin > cursor:
            raise MalformedHeader(f"gap before tensor {meta.name!r}: offsets are non-contiguous")
        cursor = end
    if cursor > payload_size:
        raise TruncatedFile(f"payload ends at {payload_size} but tensors need {cursor} bytes")
    if cursor < payload_size:
        raise MalformedHeader(f"{payload_size - cursor} trailing payload bytes not covered by header")


def _decode(meta: TensorMeta, raw: bytes) -> np.ndarray:
    if meta.dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)
    elif meta.dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    else:  # BF16: widen each 16-bit pattern into the top half of a float32
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        arr = bits.view(np.float32).copy()
    return arr.reshape(meta.shape)


def load_archive_bytes(buf: bytes) -> TensorMap:
    """Parse an in-memory archive; see `load_archive`."""
    if len(buf) < 8:
        raise TruncatedFile(f"file has {len(buf)} bytes, need at least 8 for the header length")
    (header_len,) = struct.unpack("<Q", buf[:8])
    if 8 + header_len > len(buf):
        raise TruncatedFile(f"declared header length {header_len} exceeds file size {len(buf)}")
    metas = _parse_header(buf[8 : 8 + header_len])
    payload = buf[8 + header_len :]
    _check_offsets(metas, len(payload))

    tensors: dict[str, np.ndarray] = {}
    for meta in sorted(metas, key=lambda m: m.name):
        raw = payload[meta.byte_offset : meta.byte_offset + meta.byte_length]
        arr = _decode(meta, raw)
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"tensor {meta.name!r} contains NaN or Inf")
        tensors[meta.name] = arr
    return TensorMap._from_trusted(tensors)


def load_archive(path: str | os.PathLike) -> TensorMap:
    """Load an archive from disk, upcasting every tensor to float32.

    Raises MalformedHeader, UnsupportedDtype, NonFiniteValue, TruncatedFile,
    or IoError.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return load_archive_bytes(buf)


def dump_archive_bytes(tmap: TensorMap) -> bytes:
    """Serialize a TensorMap to archive bytes (float32 payload)."""
    if len(tmap) == 0:
        raise EmptyInput("cannot serialize an empty tensor map")
    header: dict[str, dict] = {}
    offset = 0
    chunks: list[bytes] = []
    for name, arr in tmap.items():
        data = arr.astype("<f4", copy=False).tobytes(order="C")
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        offset += len(data)
        chunks.append(data)
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    # pad to an 8-byte boundary for parity with common safetensors writers
    header_bytes += b" " * (-(8 + len(header_bytes)) % 8)
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)


def _atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_archive(tmap: TensorMap, path: str | os.PathLike) -> None:
    """Write `tmap` to disk atomically; load_archive(path) is bit-identical."""
    _atomic_write_bytes(path, dump_archive_bytes(tmap))


@dataclass(frozen=True)
class CompatReport:
    """Findings from comparing two tensor maps key-by-key."""

    missing_in_a: tuple[str, ...]
    missing_in_b: tuple[str, ...]
    shape_mismatches: tuple[tuple[str, tuple[int, ...], tuple[int, ...]], ...]

    @property
    def compatible(self) -> bool:
        return not (self.missing_in_a or self.missing_in_b or self.shape_mismatches)

    def describe(self) -> str:
        if self.compatible:
            return "compatible"
        parts = []
        if self.missing_in_a:
            parts.append(f"missing in first: {list(self.missing_in_a)}")
        if self.missing_in_b:
            parts.append(f"missing in second: {list(self.missing_in_b)}")
        for name, sa, sb in self.shape_mismatches:
            parts.append(f"shape mismatch on {name!r}: {sa} vs {sb}")
        return "; ".join(parts)


def check_compatibility(a: TensorMap, b: TensorMap) -> CompatReport:
    """Report missing keys and shape mismatches; never raises."""
    a_keys, b_keys = set(a.keys()), set(b.keys())
    missing_in_a = tuple(sorted(b_keys - a_keys))
    missing_in_b = tuple(sorted(a_keys - b_keys))
    mismatches = tuple(
        (name, a[name].shape, b[name].shape)
        for name in sorted(a_keys & b_keys)
        if a[name].shape != b[name].shape
    )
    return CompatReport(missing_in_a, missing_in_b, mismatches)


def ensure_compatible(a: TensorMap, b: TensorMap, context: str = "") -> None:
    report = check_compatibility(a, b)
    if not report.compatible:
        prefix = f"{context}: " if context else ""
        raise IncompatibleShapes(prefix + report.describe())
