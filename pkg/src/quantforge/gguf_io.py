"""GGUF v3 reader and writer.

Wire layout (all little-endian)::

    magic "GGUF" | u32 version | u64 n_tensors | u64 n_kv
    n_kv x       (string key, u32 value type, value)
    n_tensors x  (string name, u32 n_dims, u64 dims[n_dims], u32 ggml type, u64 offset)
    zero padding to the alignment
    tensor data, each tensor starting at an aligned offset

Strings are a u64 byte length followed by UTF-8. ``dims`` run fastest-first,
the reverse of the row-major shape used everywhere else in this package.
"""

from __future__ import annotations

import enum
import math
import mmap
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Mapping, Sequence

import numpy as np

from . import kquant
from .core import QuantType, TensorView
from .errors import CorruptionError, FormatError, UnsupportedTypeError, ValidationError, VersionError

MAGIC = b"GGUF"
VERSION = 3
DEFAULT_ALIGNMENT = 32
ALIGNMENT_KEY = "general.alignment"
MAX_DIMS = 4


class ValueType(enum.IntEnum):
    UINT8 = 0
    INT8 = 1
    UINT16 = 2
    INT16 = 3
    UINT32 = 4
    INT32 = 5
    FLOAT32 = 6
    BOOL = 7
    STRING = 8
    ARRAY = 9
    UINT64 = 10
    INT64 = 11
    FLOAT64 = 12


_SCALAR_FORMATS = {
    ValueType.UINT8: "B",
    ValueType.INT8: "b",
    ValueType.UINT16: "H",
    ValueType.INT16: "h",
    ValueType.UINT32: "I",
    ValueType.INT32: "i",
    ValueType.FLOAT32: "f",
    ValueType.BOOL: "?",
    ValueType.UINT64: "Q",
    ValueType.INT64: "q",
    ValueType.FLOAT64: "d",
}


def _coerce(vtype: ValueType, value):
    """Normalize a Python value to what reading it back from the wire yields."""
    if vtype is ValueType.STRING:
        if not isinstance(value, str):
            raise ValidationError(f"string metadata value expected, got {type(value).__name__}")
        return value
    if vtype is ValueType.BOOL:
        return bool(value)
    if vtype is ValueType.FLOAT32:
        return float(np.float32(value))
    if vtype is ValueType.FLOAT64:
        return float(value)
    value = int(value)
    fmt = _SCALAR_FORMATS[vtype]
    try:
        struct.pack("<" + fmt, value)
    except struct.error:
        raise ValidationError(f"{value} does not fit in {vtype.name.lower()}") from None
    return value


@dataclass(frozen=True)
class MetadataValue:
    """One typed metadata value.

    Arrays carry ``item_type`` and a tuple of items; items of a nested array are
    themselves :class:`MetadataValue` instances of type ARRAY.
    """

    type: ValueType
    value: Any
    item_type: ValueType | None = None

    def __post_init__(self):
        vtype = ValueType(self.type)
        object.__setattr__(self, "type", vtype)
        if vtype is not ValueType.ARRAY:
            if self.item_type is not None:
                raise ValidationError("item_type is only meaningful for arrays")
            object.__setattr__(self, "value", _coerce(vtype, self.value))
            return
        if self.item_type is None:
            raise ValidationError("array metadata needs an item_type")
        item_type = ValueType(self.item_type)
        object.__setattr__(self, "item_type", item_type)
        items = tuple(self.value)
        if item_type is ValueType.ARRAY:
            if not all(isinstance(v, MetadataValue) and v.type is ValueType.ARRAY for v in items):
                raise ValidationError("nested array items must be array MetadataValues")
        else:
            items = tuple(_coerce(item_type, v) for v in items)
        object.__setattr__(self, "value", items)

    @classmethod
    def string(cls, text: str) -> "MetadataValue":
        return cls(ValueType.STRING, text)

    @classmethod
    def uint32(cls, n: int) -> "MetadataValue":
        return cls(ValueType.UINT32, n)

    @classmethod
    def array(cls, item_type: ValueType, items: Iterable) -> "MetadataValue":
        return cls(ValueType.ARRAY, tuple(items), item_type)

    def to_python(self):
        if self.type is ValueType.ARRAY:
            if self.item_type is ValueType.ARRAY:
                return [v.to_python() for v in self.value]
            return list(self.value)
        return self.value


@dataclass(frozen=True)
class GgufTensorInfo:
    name: str
    dims: tuple[int, ...]  # fastest-varying first
    ggml_type: int
    offset: int

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(reversed(self.dims))

    @property
    def n_elements(self) -> int:
        return math.prod(self.dims)

    @property
    def qtype(self) -> QuantType | None:
        """The storage format, or None for a type id this package does not implement."""
        return QuantType.from_ggml(self.ggml_type)

    @property
    def nbytes(self) -> int | None:
        qt = self.qtype
        return None if qt is None else qt.nbytes(self.n_elements)


def align(n: int, alignment: int) -> int:
    return -(-n // alignment) * alignment


@dataclass(frozen=True, eq=False)
class GgufFile:
    """In-memory GGUF container. ``tensor_data`` is the region after the
    aligned tensor-info section; tensor offsets are relative to its start."""

    metadata: Mapping[str, MetadataValue] = field(default_factory=dict)
    tensors: tuple[GgufTensorInfo, ...] = ()
    tensor_data: bytes | memoryview = b""
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "metadata", dict(self.metadata))
        object.__setattr__(self, "tensors", tuple(self.tensors))

    def __eq__(self, other):
        if not isinstance(other, GgufFile):
            return NotImplemented
        return (
            self.version == other.version
            and list(self.metadata.items()) == list(other.metadata.items())
            and self.tensors == other.tensors
            and bytes(self.tensor_data) == bytes(other.tensor_data)
        )

    @property
    def alignment(self) -> int:
        mv = self.metadata.get(ALIGNMENT_KEY)
        if mv is None:
            return DEFAULT_ALIGNMENT
        if mv.type is not ValueType.UINT32 or mv.value <= 0:
            raise CorruptionError(f"field {ALIGNMENT_KEY!r} must be a positive uint32")
        return mv.value

    def tensor(self, name: str) -> GgufTensorInfo:
        for info in self.tensors:
            if info.name == name:
                return info
        raise KeyError(name)

    def _extent(self, info: GgufTensorInfo) -> int:
        if info.nbytes is not None:
            return info.nbytes
        # opaque tensors run to the next tensor's offset or the end of the data
        later = [t.offset for t in self.tensors if t.offset > info.offset]
        return (min(later) if later else len(self.tensor_data)) - info.offset

    def tensor_bytes(self, name: str) -> memoryview:
        info = self.tensor(name)
        return memoryview(self.tensor_data)[info.offset : info.offset + self._extent(info)]

    def read_tensor(self, name: str) -> np.ndarray:
        """Dequantize one tensor to float32 in its row-major shape."""
        info = self.tensor(name)
        if info.qtype is None:
            raise UnsupportedTypeError(f"tensor {name!r} has ggml type {info.ggml_type}, which cannot be dequantized here")
        return kquant.dequantize(self.tensor_bytes(name), info.qtype).reshape(info.shape)

    def as_tensor_view(self, name: str) -> TensorView:
        info = self.tensor(name)
        if info.qtype is None:
            raise UnsupportedTypeError(f"tensor {name!r} has unsupported ggml type {info.ggml_type}")
        return TensorView(name, info.shape, info.qtype, bytes(self.tensor_bytes(name)))


# --- writing ---------------------------------------------------------------


def _string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def _value_bytes(mv: MetadataValue) -> bytes:
    if mv.type is ValueType.STRING:
        return _string(mv.value)
    if mv.type is ValueType.ARRAY:
        parts = [struct.pack("<IQ", mv.item_type, len(mv.value))]
        if mv.item_type is ValueType.STRING:
            parts.extend(_string(v) for v in mv.value)
        elif mv.item_type is ValueType.ARRAY:
            parts.extend(_value_bytes(v) for v in mv.value)
        else:
            parts.append(struct.pack(f"<{len(mv.value)}{_SCALAR_FORMATS[mv.item_type]}", *mv.value))
        return b"".join(parts)
    return struct.pack("<" + _SCALAR_FORMATS[mv.type], mv.value)


def _header_bytes(metadata: Mapping[str, MetadataValue], tensors: Sequence[GgufTensorInfo], version: int) -> bytes:
    parts = [MAGIC, struct.pack("<IQQ", version, len(tensors), len(metadata))]
    for key, mv in metadata.items():
        parts.append(_string(key))
        parts.append(struct.pack("<I", mv.type))
        parts.append(_value_bytes(mv))
    for info in tensors:
        parts.append(_string(info.name))
        parts.append(struct.pack(f"<I{len(info.dims)}Q", len(info.dims), *info.dims))
        parts.append(struct.pack("<IQ", info.ggml_type, info.offset))
    return b"".join(parts)


def validate(file: GgufFile) -> None:
    """Raise ValidationError if ``file`` cannot be serialized faithfully."""
    if file.version != VERSION:
        raise ValidationError(f"only GGUF version {VERSION} can be written, not {file.version}")
    try:
        alignment = file.alignment
    except CorruptionError as exc:
        raise ValidationError(str(exc)) from None
    names = set()
    end = 0
    for info in sorted(file.tensors, key=lambda t: t.offset):
        if info.name in names:
            raise ValidationError(f"duplicate tensor name {info.name!r}")
        names.add(info.name)
        if not 1 <= len(info.dims) <= MAX_DIMS or min(info.dims) < 1:
            raise ValidationError(f"tensor {info.name!r}: invalid dims {list(info.dims)}")
        if info.offset % alignment:
            raise ValidationError(f"tensor {info.name!r}: offset {info.offset} not aligned to {alignment}")
        if info.offset < end:
            raise ValidationError(f"tensor {info.name!r} overlaps the previous tensor")
        if info.qtype is not None and info.dims[0] % info.qtype.block_elems:
            raise ValidationError(f"tensor {info.name!r}: row length {info.dims[0]} is not whole {info.qtype.tag} blocks")
        end = info.offset + file._extent(info)
        if end > len(file.tensor_data):
            raise ValidationError(
                f"tensor {info.name!r} needs bytes up to {end}, data region has {len(file.tensor_data)}"
            )


def gguf_bytes(file: GgufFile) -> bytes:
    validate(file)
    head = _header_bytes(file.metadata, file.tensors, file.version)
    pad = align(len(head), file.alignment) - len(head)
    return b"".join([head, bytes(pad), bytes(file.tensor_data)])


def write_gguf(file: GgufFile, sink: BinaryIO | str | Path) -> int:
    """Serialize ``file``; returns the number of bytes written.

    Validation happens first, so an invalid file writes nothing.
    """
    data = gguf_bytes(file)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)


def assemble(
    metadata: Mapping[str, MetadataValue],
    tensors: Iterable[tuple[str, Sequence[int], int, bytes]],
) -> GgufFile:
    """Lay out ``(name, shape, ggml_type, data)`` tensors at aligned offsets, in order."""
    alignment = GgufFile(metadata).alignment
    infos, chunks, offset = [], [], 0
    for name, shape, ggml_type, data in tensors:
        infos.append(GgufTensorInfo(name, tuple(reversed(tuple(shape))), ggml_type, offset))
        chunks.append(data)
        padded = align(len(data), alignment)
        if padded > len(data):
            chunks.append(bytes(padded - len(data)))
        offset += padded
    return GgufFile(metadata, tuple(infos), b"".join(chunks))


def serialized_size(
    metadata: Mapping[str, MetadataValue],
    tensors: Sequence[tuple[str, Sequence[int], int]],
    data_sizes: Sequence[int],
) -> int:
    """Exact file size :func:`assemble` plus :func:`write_gguf` would produce, without the data."""
    alignment = GgufFile(metadata).alignment
    infos = [GgufTensorInfo(name, tuple(reversed(tuple(shape))), t, 0) for name, shape, t in tensors]
    head = len(_header_bytes(metadata, infos, VERSION))
    return align(head, alignment) + sum(align(n, alignment) for n in data_sizes)


# --- reading ---------------------------------------------------------------


class _Cursor:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("Q", what + " length")
        try:
            return str(self.take(n, what), "utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"{what} is not valid UTF-8") from None


def _read_type(cur: _Cursor, what: str) -> ValueType:
    (raw,) = cur.unpack("I", what)
    try:
        return ValueType(raw)
    except ValueError:
        raise CorruptionError(f"{what}: unknown metadata value type {raw}") from None


def _read_value(cur: _Cursor, vtype: ValueType, what: str) -> MetadataValue:
    if vtype is ValueType.STRING:
        return MetadataValue(vtype, cur.string(what))
    if vtype is ValueType.ARRAY:
        item_type = _read_type(cur, what + " item type")
        (n,) = cur.unpack("Q", what + " array length")
        if item_type is ValueType.STRING:
            items = [cur.string(f"{what}[{i}]") for i in range(n)]
        elif item_type is ValueType.ARRAY:
            items = [_read_value(cur, ValueType.ARRAY, f"{what}[{i}]") for i in range(n)]
        else:
            fmt = _SCALAR_FORMATS[item_type]
            size = struct.calcsize(fmt)
            if n > (len(cur.buf) - cur.pos) // size:
                raise CorruptionError(f"truncated file while reading {what} ({n} items)")
            items = struct.unpack(f"<{n}{fmt}", cur.take(n * size, what))
        return MetadataValue(vtype, items, item_type)
    (v,) = cur.unpack(_SCALAR_FORMATS[vtype], what)
    return MetadataValue(vtype, v)


def _open(source) -> memoryview:
    if isinstance(source, (str, Path)):
        path = Path(source)
        with open(path, "rb") as fh:
            if path.stat().st_size == 0:
                return memoryview(b"")
            return memoryview(mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ))
    if hasattr(source, "read"):
        return memoryview(source.read())
    return memoryview(source).cast("B")


def read_gguf(source) -> GgufFile:
    """Parse a GGUF v3 file from a path, a binary stream or a bytes-like object.

    Paths are memory-mapped and the tensor data is a view into the map.
    """
    buf = _open(source)
    if bytes(buf[:4]) != MAGIC:
        raise FormatError("not a GGUF file (bad magic)")
    cur = _Cursor(buf)
    cur.pos = 4
    (version,) = cur.unpack("I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported GGUF version {version} (only {VERSION} is supported)")
    n_tensors, n_kv = cur.unpack("QQ", "tensor and metadata counts")

    metadata: dict[str, MetadataValue] = {}
    for i in range(n_kv):
        key = cur.string(f"metadata key {i}")
        if key in metadata:
            raise CorruptionError(f"duplicate metadata key {key!r}")
        metadata[key] = _read_value(cur, _read_type(cur, f"type of {key!r}"), f"value of {key!r}")

    infos = []
    for i in range(n_tensors):
        name = cur.string(f"tensor {i} name")
        (n_dims,) = cur.unpack("I", f"tensor {name!r} n_dims")
        if not 1 <= n_dims <= MAX_DIMS:
            raise CorruptionError(f"tensor {name!r}: field 'n_dims' is {n_dims}")
        dims = cur.unpack(f"{n_dims}Q", f"tensor {name!r} dims")
        ggml_type, offset = cur.unpack("IQ", f"tensor {name!r} type and offset")
        infos.append(GgufTensorInfo(name, dims, ggml_type, offset))

    file = GgufFile(metadata, tuple(infos), version=version)
    alignment = file.alignment
    start = align(cur.pos, alignment)
    if start > len(buf):
        raise CorruptionError("truncated file: tensor data region missing")
    file = GgufFile(metadata, tuple(infos), buf[start:], version)
    _check_tensors(file, alignment)
    return file


def _check_tensors(file: GgufFile, alignment: int) -> None:
    names = Counter(t.name for t in file.tensors)
    dupes = [n for n, c in names.items() if c > 1]
    if dupes:
        raise CorruptionError(f"duplicate tensor name {dupes[0]!r}")
    end, prev = 0, None
    for info in sorted(file.tensors, key=lambda t: t.offset):
        if info.offset % alignment:
            raise CorruptionError(f"tensor {info.name!r}: field 'offset' ({info.offset}) is not aligned to {alignment}")
        if info.offset < end:
            raise CorruptionError(f"tensor {info.name!r}: field 'offset' overlaps tensor {prev!r}")
        qt = info.qtype
        if qt is not None and info.dims[0] % qt.block_elems:
            raise CorruptionError(f"tensor {info.name!r}: field 'dims' row {info.dims[0]} is not whole {qt.tag} blocks")
        size = file._extent(info)
        end = info.offset + size
        if end > len(file.tensor_data):
            raise CorruptionError(
                f"tensor {info.name!r}: truncated data, needs {end} bytes of tensor data, file has {len(file.tensor_data)}"
            )
        prev = info.name


# --- model packing ---------------------------------------------------------

PRODUCER = "quantforge"


def model_metadata(
    model_name: str,
    type_counts: Mapping[str, int],
    plan_name: str | None = None,
    extra: Mapping[str, str] | None = None,
    architecture: str = "llama",
    alignment: int = DEFAULT_ALIGNMENT,
) -> dict[str, MetadataValue]:
    """The standard key set written for a packed model, in canonical order.

    ``extra`` (source-container metadata, for instance) is copied as strings;
    keys without a namespace dot are placed under ``source.``.
    """
    md = {
        "general.architecture": MetadataValue.string(architecture),
        "general.name": MetadataValue.string(model_name),
        ALIGNMENT_KEY: MetadataValue.uint32(alignment),
        "general.quantized_by": MetadataValue.string(PRODUCER),
        "quantize.plan": MetadataValue.string(plan_name or "none"),
        "quantize.type_counts": MetadataValue.array(
            ValueType.STRING, [f"{tag}={n}" for tag, n in sorted(type_counts.items())]
        ),
    }
    for key, value in (extra or {}).items():
        key = key if "." in key else f"source.{key}"
        md.setdefault(key, MetadataValue.string(str(value)))
    return md


def pack_model(
    tensors: Sequence[TensorView],
    model_name: str,
    metadata: Mapping[str, str] | None = None,
    plan_name: str | None = None,
    architecture: str = "llama",
) -> GgufFile:
    """Build a GGUF file from already-encoded tensors, keeping their order."""
    for t in tensors:
        if t.dtype.ggml_type is None:
            raise UnsupportedTypeError(
                f"tensor {t.name!r} is {t.dtype.tag}, which GGUF cannot store; "
                "dequantize it and convert to a k-quant or scalar type first"
            )
    counts = Counter(t.dtype.tag for t in tensors)
    md = model_metadata(model_name, counts, plan_name, metadata, architecture)
    return assemble(md, ((t.name, t.shape, t.dtype.ggml_type, t.data) for t in tensors))
