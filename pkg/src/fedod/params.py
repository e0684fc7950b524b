"""Parameter containers, deterministic RNG, and the FDW1 wire format.

Model weights travel between clients and server as a ``ParamSet``: an
ordered list of named float32 tensors. Two sets are aggregation-compatible
iff their schema hashes (names + shapes, in order) are equal.

Wire format "FDW1" (also the on-disk ``.fdw`` checkpoint format):

    magic       4 bytes  b"FDW1"
    count       u32 LE   number of tensors
    per tensor:
        name_len u16 LE
        name     UTF-8 bytes
        rank     u8       (1..4)
        dims     rank x u32 LE
        values   prod(dims) x f32 LE
    crc         u32 LE   CRC-32 (IEEE) over everything after the magic

All integers little-endian. Deserializing a payload that is truncated, has
a bad magic, a bad checksum, or inconsistent dims raises MalformedPayload.

Randomness comes from the Philox 4x64 counter-based generator keyed with
``(seed, stream)``; equal keys yield bit-identical draw sequences. Streams
for sub-tasks are derived by hashing a text label with 64-bit FNV-1a
(see :func:`derive_stream`), so e.g. sample 17 of a dataset always uses
the stream ``fnv1a64(b"sample/17")`` regardless of generation order.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FedodError

MAGIC = b"FDW1"
MAX_RANK = 4

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class SchemaMismatch(FedodError):
    """Two parameter sets do not share the same (names, dims) schema."""


class MalformedPayload(FedodError):
    """A byte payload does not parse as a valid FDW1 parameter set."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def derive_stream(label: str) -> int:
    """Map a purpose label (e.g. "train/client1/3") to a Philox stream id."""
    return fnv1a64(label.encode("utf-8"))


class Rng:
    """Deterministic random source: Philox 4x64 keyed with (seed, stream).

    Same (seed, stream) gives the same draw sequence on every platform.
    Single-owner: never share one instance across threads.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed <= _U64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.stream = stream & _U64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "Rng":
        """A fresh Rng for a named sub-task, independent of this one."""
        return Rng(self.seed, derive_stream(label))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high) like numpy's Generator.integers."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def _as_f32(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    return arr


@dataclass(frozen=True)
class Tensor:
    """A named, shaped block of float32 values (rank 1 to 4).

    The value array is stored C-contiguous and read-only; `values.size`
    always equals the product of `dims`.
    """

    name: str
    dims: tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or len(dims) > MAX_RANK:
            raise ValueError(f"tensor {self.name!r}: rank must be 1..{MAX_RANK}, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ValueError(f"tensor {self.name!r}: dims must be >= 1, got {dims}")
        arr = _as_f32(self.values).reshape(dims)
        if not np.isfinite(arr).all():
            raise ValueError(f"tensor {self.name!r}: values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", arr)

    @property
    def size(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dims == other.dims
            and self.values.tobytes() == other.values.tobytes()
        )


class ParamSet:
    """An ordered, immutable collection of uniquely named tensors."""

    __slots__ = ("tensors", "_schema_hash", "_by_name")

    def __init__(self, tensors):
        tensors = tuple(tensors)
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            raise ValueError("tensor names must be unique within a ParamSet")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "_by_name", {t.name: t for t in tensors})
        h = _FNV_OFFSET
        for t in tensors:
            blob = t.name.encode("utf-8") + struct.pack("<B", len(t.dims))
            blob += struct.pack(f"<{len(t.dims)}I", *t.dims)
            for b in blob:
                h = ((h ^ b) * _FNV_PRIME) & _U64
        object.__setattr__(self, "_schema_hash", h)

    @classmethod
    def from_arrays(cls, named_arrays) -> "ParamSet":
        """Build from an ordered iterable of (name, array) pairs."""
        return cls(Tensor(name, np.shape(arr), arr) for name, arr in named_arrays)

    @property
    def schema_hash(self) -> int:
        return self._schema_hash

    def array(self, name: str) -> np.ndarray:
        return self._by_name[name].values

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> read-only array view, in tensor order."""
        return {t.name: t.values for t in self.tensors}

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.tensors == other.tensors

    def __repr__(self):
        inner = ", ".join(f"{t.name}{list(t.dims)}" for t in self.tensors)
        return f"ParamSet({inner})"


def zeros_like(p: ParamSet) -> ParamSet:
    """Same schema as `p`, every value 0.0."""
    return ParamSet(Tensor(t.name, t.dims, np.zeros(t.dims, np.float32)) for t in p)


def axpy(alpha: float, x: ParamSet, y: ParamSet) -> ParamSet:
    """Elementwise alpha*x + y. Accumulates in float64, rounds to float32 once."""
    if x.schema_hash != y.schema_hash:
        raise SchemaMismatch(
            f"axpy operands disagree: {x.schema_hash:#018x} vs {y.schema_hash:#018x}"
        )
    out = []
    for tx, ty in zip(x, y):
        v = (float(alpha) * tx.values.astype(np.float64) + ty.values.astype(np.float64))
        out.append(Tensor(tx.name, tx.dims, v.astype(np.float32)))
    return ParamSet(out)


def serialize(p: ParamSet) -> bytes:
    """Encode a ParamSet to FDW1 bytes."""
    parts = [struct.pack("<I", len(p.tensors))]
    for t in p:
        name = t.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<B", len(t.dims)))
        parts.append(struct.pack(f"<{len(t.dims)}I", *t.dims))
        parts.append(t.values.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MalformedPayload(
                f"truncated payload: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def deserialize(b: bytes) -> ParamSet:
    """Decode FDW1 bytes back into a ParamSet. Raises MalformedPayload."""
    if len(b) < len(MAGIC) + 8:
        raise MalformedPayload(f"payload too short: {len(b)} bytes")
    if b[:4] != MAGIC:
        raise MalformedPayload(f"bad magic {b[:4]!r}, expected {MAGIC!r}")
    body, crc_bytes = b[4:-4], b[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) != crc_stored:
        raise MalformedPayload("checksum mismatch")

    r = _Reader(body)
    count = r.u32()
    tensors = []
    for _ in range(count):
        name_len = r.u16()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedPayload(f"tensor name is not valid UTF-8: {e}") from e
        rank = r.u8()
        if not 1 <= rank <= MAX_RANK:
            raise MalformedPayload(f"tensor {name!r}: rank {rank} outside 1..{MAX_RANK}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if any(d < 1 for d in dims):
            raise MalformedPayload(f"tensor {name!r}: dim of 0 in {dims}")
        n = 1
        for d in dims:
            n *= d
        raw = r.take(4 * n)
        values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if not np.isfinite(values).all():
            raise MalformedPayload(f"tensor {name!r}: non-finite values")
        tensors.append(Tensor(name, dims, values))
    if r.pos != len(body):
        raise MalformedPayload(f"{len(body) - r.pos} trailing bytes after last tensor")
    try:
        return ParamSet(tensors)
    except ValueError as e:
        raise MalformedPayload(str(e)) from e


def save(p: ParamSet, path) -> None:
    """Write a .fdw checkpoint file."""
    with open(path, "wb") as f:
        f.write(serialize(p))


def load(path) -> ParamSet:
    """Read a .fdw checkpoint file."""
    with open(path, "rb") as f:
        return deserialize(f.read())
