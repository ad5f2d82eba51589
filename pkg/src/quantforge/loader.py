"""Open a model file of either supported container type behind one interface."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gguf_io, safetensors_io
from .errors import ArgumentError


@dataclass
class OpenedModel:
    label: str
    kind: str  # "gguf" or "safetensors"
    file_bytes: int
    gguf: gguf_io.GgufFile | None = None
    manifest: object = None
    accessor: safetensors_io.TensorAccessor | None = None

    @property
    def names(self) -> list[str]:
        if self.gguf is not None:
            return [t.name for t in self.gguf.tensors]
        return [e.name for e in self.manifest.entries]

    def shape(self, name: str) -> tuple[int, ...]:
        if self.gguf is not None:
            return self.gguf.tensor(name).shape
        return self.accessor.entry(name).shape

    def type_tag(self, name: str) -> str:
        if self.gguf is not None:
            info = self.gguf.tensor(name)
            return info.qtype.tag if info.qtype else f"ggml:{info.ggml_type}"
        return self.accessor.entry(name).dtype.tag

    def nbytes(self, name: str) -> int:
        if self.gguf is not None:
            return len(self.gguf.tensor_bytes(name))
        return len(self.accessor.raw(name))

    def load(self, name: str) -> np.ndarray:
        if self.gguf is not None:
            return self.gguf.read_tensor(name)
        return self.accessor.get(name)


def is_gguf(path: str | Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == gguf_io.MAGIC


def open_model(path: str | Path) -> OpenedModel:
    """Open a GGUF file or a safetensors container, chosen by the file's magic bytes."""
    path = Path(path)
    if not path.is_file():
        raise ArgumentError(f"input file not found: {path}")
    size = os.path.getsize(path)
    if is_gguf(path):
        return OpenedModel(str(path), "gguf", size, gguf=gguf_io.read_gguf(path))
    manifest, accessor = safetensors_io.read_container(path)
    return OpenedModel(str(path), "safetensors", size, manifest=manifest, accessor=accessor)
