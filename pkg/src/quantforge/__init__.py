"""Post-training weight quantization: affine, NF4 and GGUF k-quant formats,
GGUF and safetensors containers, and model size accounting."""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Assignment,
    ManifestEntry,
    ModelManifest,
    QuantPlan,
    QuantType,
    ScalarType,
    TensorView,
    assign_types,
)
from .errors import (  # noqa: E402
    ArgumentError,
    CorruptionError,
    DiffError,
    FormatError,
    QuantForgeError,
    RangeError,
    UnsupportedTypeError,
    ValidationError,
    VersionError,
)

__all__ = [
    "__version__",
    "Assignment",
    "ManifestEntry",
    "ModelManifest",
    "QuantPlan",
    "QuantType",
    "ScalarType",
    "TensorView",
    "assign_types",
    "ArgumentError",
    "CorruptionError",
    "DiffError",
    "FormatError",
    "QuantForgeError",
    "RangeError",
    "UnsupportedTypeError",
    "ValidationError",
    "VersionError",
]
