"""Value types shared by every stage: element types, storage formats, tensors,
model manifests and quantization plans."""

from __future__ import annotations

import enum
import fnmatch
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

from .errors import ArgumentError, FormatError


class ScalarType(enum.Enum):
    F32 = ("F32", 32)
    F16 = ("F16", 16)
    BF16 = ("BF16", 16)

    def __init__(self, tag: str, bits: int):
        self.tag = tag
        self.bits = bits

    @property
    def nbytes(self) -> int:
        return self.bits // 8

    @property
    def quant_type(self) -> "QuantType":
        return QuantType[self.name]

    @classmethod
    def parse(cls, text: str) -> "ScalarType":
        try:
            return cls[text.upper()]
        except KeyError:
            raise ArgumentError(f"unknown scalar dtype {text!r}") from None


class QuantType(enum.Enum):
    """Storage format with fixed block geometry.

    ``ggml_type`` is the GGUF type id, or None for formats GGUF cannot store.
    """

    F32 = ("F32", 1, 4, 0)
    F16 = ("F16", 1, 2, 1)
    BF16 = ("BF16", 1, 2, 30)
    Q8_0 = ("Q8_0", 32, 34, 8)
    Q4_K = ("Q4_K", 256, 144, 12)
    Q6_K = ("Q6_K", 256, 210, 14)
    NF4 = ("NF4", 64, 36, None)

    def __init__(self, tag: str, block_elems: int, block_bytes: int, ggml_type: int | None):
        self.tag = tag
        self.block_elems = block_elems
        self.block_bytes = block_bytes
        self.ggml_type = ggml_type

    @property
    def bits_per_weight(self) -> float:
        return 8 * self.block_bytes / self.block_elems

    @property
    def is_scalar(self) -> bool:
        return self.block_elems == 1

    def nbytes(self, n_elements: int) -> int:
        if n_elements % self.block_elems:
            raise ArgumentError(
                f"{n_elements} elements is not a whole number of {self.tag} blocks "
                f"({self.block_elems} per block)"
            )
        return n_elements // self.block_elems * self.block_bytes

    @classmethod
    def parse(cls, text: str) -> "QuantType":
        key = text.upper()
        if key in cls.__members__:
            return cls[key]
        raise ArgumentError(f"unknown quantization type {text!r}")

    @classmethod
    def from_ggml(cls, type_id: int) -> "QuantType | None":
        for qt in cls:
            if qt.ggml_type == type_id:
                return qt
        return None


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ArgumentError(f"invalid shape {list(shape)}: need at least one dimension, all >= 1")
    return shape


@dataclass(frozen=True)
class TensorView:
    """A named tensor stored in one of the :class:`QuantType` formats.

    ``shape`` is row-major; the last dimension is the contiguous row and must be
    a whole number of blocks.
    """

    name: str
    shape: tuple[int, ...]
    dtype: QuantType
    data: bytes = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", _check_shape(self.shape))
        if self.shape[-1] % self.dtype.block_elems:
            raise ArgumentError(
                f"{self.name}: row length {self.shape[-1]} not divisible by "
                f"{self.dtype.tag} block size {self.dtype.block_elems}"
            )
        expected = self.dtype.nbytes(self.n_elements)
        if len(self.data) != expected:
            raise ArgumentError(
                f"{self.name}: {len(self.data)} data bytes, expected {expected} "
                f"for {self.dtype.tag}{list(self.shape)}"
            )

    @property
    def n_elements(self) -> int:
        return math.prod(self.shape)

    @property
    def n_rows(self) -> int:
        return math.prod(self.shape[:-1])

    @property
    def nbytes(self) -> int:
        return len(self.data)


class ManifestEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    dtype: ScalarType

    @property
    def n_elements(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModelManifest:
    """Names, shapes and source dtypes of a model's tensors; no weights."""

    model_name: str
    entries: tuple[ManifestEntry, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        entries = tuple(
            ManifestEntry(str(e[0]), _check_shape(e[1]), e[2]) for e in self.entries
        )
        seen = set()
        for e in entries:
            if e.name in seen:
                raise ArgumentError(f"duplicate tensor name {e.name!r} in manifest")
            seen.add(e.name)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @property
    def n_params(self) -> int:
        return sum(e.n_elements for e in self.entries)

    @property
    def source_bytes(self) -> int:
        return sum(e.n_elements * e.dtype.nbytes for e in self.entries)

    def __getitem__(self, name: str) -> ManifestEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_json(self) -> dict[str, Any]:
        return {
            "model_name": self.model_name,
            "entries": [
                {"name": e.name, "shape": list(e.shape), "dtype": e.dtype.tag} for e in self.entries
            ],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "ModelManifest":
        try:
            entries = [
                ManifestEntry(e["name"], tuple(e["shape"]), ScalarType.parse(e["dtype"]))
                for e in doc["entries"]
            ]
            return cls(doc["model_name"], tuple(entries), doc.get("metadata", {}))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest document: {exc!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid manifest JSON: {exc}") from None
        return cls.from_json(doc)


SOURCE = "source"


@dataclass(frozen=True)
class QuantPlan:
    """Name-pattern rules mapping tensors to storage types.

    Rules are glob patterns tried in order, first match wins. ``default=None``
    means "keep the source dtype" (the identity plan).
    """

    name: str
    default: QuantType | None
    rules: tuple[tuple[str, QuantType | None], ...] = ()
    fallback: QuantType = QuantType.F16

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple((str(p), t) for p, t in self.rules))

    def target(self, name: str) -> QuantType | None:
        for pattern, qtype in self.rules:
            if fnmatch.fnmatchcase(name, pattern):
                return qtype
        return self.default

    def to_json(self) -> dict[str, Any]:
        def tag(t):
            return SOURCE if t is None else t.tag

        return {
            "name": self.name,
            "default": tag(self.default),
            "fallback": self.fallback.tag,
            "rules": [{"pattern": p, "type": tag(t)} for p, t in self.rules],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "QuantPlan":
        def parse(t):
            return None if t == SOURCE else QuantType.parse(t)

        try:
            fallback = QuantType.parse(doc.get("fallback", "F16"))
            if not fallback.is_scalar:
                raise ArgumentError(f"plan fallback must be a scalar type, got {fallback.tag}")
            return cls(
                name=str(doc.get("name", "custom")),
                default=parse(doc["default"]),
                rules=tuple((r["pattern"], parse(r["type"])) for r in doc.get("rules", [])),
                fallback=fallback,
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ArgumentError(f"malformed plan document: {exc!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "QuantPlan":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"{path}: invalid plan JSON: {exc}") from None
        except OSError as exc:
            raise ArgumentError(f"cannot read plan file {path}: {exc}") from None
        return cls.from_json(doc)


class Assignment(NamedTuple):
    name: str
    qtype: QuantType
    # why the plan's choice was overridden; None when it was not
    note: str | None = None


def assign_types(manifest: ModelManifest, plan: QuantPlan) -> list[Assignment]:
    """Resolve a storage type for every manifest entry.

    1-D tensors go to F32 (block formats need whole-block rows) unless the plan
    keeps the source dtype. A row length that is not a multiple of the chosen
    block size falls back to ``plan.fallback``; both overrides are noted.
    """
    out = []
    for entry in manifest.entries:
        wanted = plan.target(entry.name)
        keep_source = wanted is None
        if keep_source:
            wanted = entry.dtype.quant_type
        if len(entry.shape) == 1 and not keep_source:
            note = None if wanted is QuantType.F32 else f"1-D tensor pinned to F32 (plan: {wanted.tag})"
            out.append(Assignment(entry.name, QuantType.F32, note))
        elif entry.shape[-1] % wanted.block_elems:
            out.append(
                Assignment(
                    entry.name,
                    plan.fallback,
                    f"row length {entry.shape[-1]} not divisible by {wanted.block_elems}; "
                    f"{wanted.tag} -> {plan.fallback.tag}",
                )
            )
        else:
            out.append(Assignment(entry.name, wanted))
    return out


def iter_fallbacks(assignments: Iterable[Assignment]) -> list[Assignment]:
    return [a for a in assignments if a.note]
