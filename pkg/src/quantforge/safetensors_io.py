"""Single-file safetensors containers: lazy reading and synthetic fixtures.

Layout: u64 little-endian header length, a JSON header mapping tensor names to
``{"dtype", "shape", "data_offsets": [begin, end]}`` (plus an optional
``"__metadata__"`` string map), then the raw little-endian data region.
"""

from __future__ import annotations

import json
import math
import mmap
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from . import kquant
from .core import ManifestEntry, ModelManifest, ScalarType
from .errors import CorruptionError, FormatError, UnsupportedTypeError

SYNTH_STD = 0.02
METADATA_KEY = "__metadata__"
MODEL_NAME_KEY = "model_name"

_DTYPES = {"F32": ScalarType.F32, "F16": ScalarType.F16, "BF16": ScalarType.BF16}


@dataclass(frozen=True)
class _Slot:
    entry: ManifestEntry
    begin: int
    end: int


class TensorAccessor:
    """Per-tensor access to a container's data region; nothing is read until asked."""

    def __init__(self, data: memoryview, slots: Mapping[str, _Slot]):
        self._data = data
        self._slots = dict(slots)

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def entry(self, name: str) -> ManifestEntry:
        return self._slots[name].entry

    def raw(self, name: str) -> memoryview:
        slot = self._slots[name]
        return self._data[slot.begin : slot.end]

    def get(self, name: str) -> np.ndarray:
        """The tensor as float32 (F16 and BF16 are widened), in its shape."""
        entry = self._slots[name].entry
        values = kquant.decode_scalar(self.raw(name), entry.dtype.quant_type)
        return values.reshape(entry.shape)

    __getitem__ = get


def _open(source) -> memoryview:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.name.endswith(".index.json"):
            raise FormatError(f"{path}: sharded checkpoints are not supported; merge the shards into one file")
        with open(path, "rb") as fh:
            if path.stat().st_size == 0:
                return memoryview(b"")
            return memoryview(mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ))
    if hasattr(source, "read"):
        return memoryview(source.read())
    return memoryview(source).cast("B")


def _parse_entry(name: str, spec) -> tuple[ManifestEntry, int, int]:
    if not isinstance(spec, dict):
        raise FormatError(f"tensor {name!r}: header entry is not an object")
    dtype = spec.get("dtype")
    if dtype not in _DTYPES:
        raise UnsupportedTypeError(f"tensor {name!r}: unsupported dtype {dtype!r} (supported: F32, F16, BF16)")
    shape = spec.get("shape")
    offsets = spec.get("data_offsets")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise FormatError(f"tensor {name!r}: field 'shape' is malformed")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and o >= 0 for o in offsets)
    ):
        raise FormatError(f"tensor {name!r}: field 'data_offsets' is malformed")
    if not shape or 0 in shape:
        raise UnsupportedTypeError(f"tensor {name!r}: empty or 0-d tensors are not supported (shape {shape})")
    return ManifestEntry(name, tuple(shape), _DTYPES[dtype]), offsets[0], offsets[1]


def read_container(source, model_name: str | None = None) -> tuple[ModelManifest, TensorAccessor]:
    """Parse the header of a safetensors file (path, stream or bytes).

    Tensor bytes stay in place (paths are memory-mapped) until requested
    through the returned accessor.
    """
    buf = _open(source)
    if len(buf) < 8:
        raise CorruptionError("truncated container: missing the 8-byte header length")
    (header_len,) = struct.unpack("<Q", buf[:8])
    if header_len > len(buf) - 8:
        raise CorruptionError(f"header length {header_len} points past the end of the file ({len(buf)} bytes)")
    try:
        header = json.loads(str(buf[8 : 8 + header_len], "utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed container header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("malformed container header: not a JSON object")
    if "weight_map" in header:
        raise FormatError("sharded checkpoint index given; only single-file containers are supported")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict):
        raise FormatError(f"field {METADATA_KEY!r} is not a string map")
    data = buf[8 + header_len :]

    slots = {}
    for name, spec in header.items():
        entry, begin, end = _parse_entry(name, spec)
        width = entry.dtype.nbytes
        if end < begin or end > len(data):
            raise CorruptionError(f"tensor {name!r}: data_offsets [{begin}, {end}) out of range (data region {len(data)} bytes)")
        if end - begin != entry.n_elements * width:
            raise CorruptionError(
                f"tensor {name!r}: data_offsets span {end - begin} bytes, shape needs {entry.n_elements * width}"
            )
        slots[name] = _Slot(entry, begin, end)

    ordered = sorted(slots.values(), key=lambda s: (s.begin, s.end))
    for a, b in zip(ordered, ordered[1:]):
        if b.begin < a.end:
            raise CorruptionError(f"tensors {a.entry.name!r} and {b.entry.name!r} have overlapping data_offsets")

    stored_name = metadata.pop(MODEL_NAME_KEY, None)
    if model_name is None:
        model_name = stored_name or (Path(source).stem if isinstance(source, (str, Path)) else "model")
    manifest = ModelManifest(model_name, tuple(s.entry for s in slots.values()), metadata)
    return manifest, TensorAccessor(data, slots)


# --- writing ---------------------------------------------------------------


def _header(manifest: ModelManifest) -> bytes:
    doc: dict = {METADATA_KEY: {**manifest.metadata, MODEL_NAME_KEY: manifest.model_name}}
    offset = 0
    for e in manifest.entries:
        size = e.n_elements * e.dtype.nbytes
        doc[e.name] = {"dtype": e.dtype.tag, "shape": list(e.shape), "data_offsets": [offset, offset + size]}
        offset += size
    raw = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    # pad with spaces so the data region starts 8-byte aligned
    raw += b" " * (-len(raw) % 8)
    return struct.pack("<Q", len(raw)) + raw


def _synth_values(entry: ManifestEntry, rng: np.random.Generator) -> bytes:
    values = rng.standard_normal(entry.n_elements, dtype=np.float32) * np.float32(SYNTH_STD)
    return kquant.convert_scalar(values, entry.dtype.quant_type)


def write_fixture(manifest: ModelManifest, seed: int, sink: BinaryIO | str | Path) -> int:
    """Stream :func:`synth_fixture` output to a path or binary stream; returns bytes written."""
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            return write_fixture(manifest, seed, fh)
    rng = np.random.default_rng(seed)
    total = sink.write(_header(manifest))
    for e in manifest.entries:
        total += sink.write(_synth_values(e, rng))
    return total


def synth_fixture(manifest: ModelManifest, seed: int) -> bytes:
    """A container of N(0, 0.02) weights for every manifest entry, stored in the entry's dtype.

    Output depends only on ``(manifest, seed)``.
    """
    rng = np.random.default_rng(seed)
    return _header(manifest) + b"".join(_synth_values(e, rng) for e in manifest.entries)


def write_container(tensors: Mapping[str, np.ndarray], dtype: ScalarType = ScalarType.F32,
                    metadata: Mapping[str, str] | None = None) -> bytes:
    """Encode float arrays into a container, all stored as ``dtype``."""
    entries = tuple(ManifestEntry(n, tuple(np.shape(a)), dtype) for n, a in tensors.items())
    name = (metadata or {}).get(MODEL_NAME_KEY, "model")
    manifest = ModelManifest(name, entries, {k: v for k, v in (metadata or {}).items() if k != MODEL_NAME_KEY})
    body = b"".join(kquant.convert_scalar(np.asarray(a), dtype.quant_type) for a in tensors.values())
    return _header(manifest) + body


def source_nbytes(manifest: ModelManifest) -> int:
    return len(_header(manifest)) + sum(math.prod(e.shape) * e.dtype.nbytes for e in manifest.entries)

