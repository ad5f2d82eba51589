"""Affine (scale / zero-point) quantization: ``q = clamp(round(r / s) + z)``.

Arithmetic is done in float32, rounding is half-away-from-zero and values
outside the representable range saturate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, RangeError


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy's rint ties to even).

    Exact for every float: ``x - trunc(x)`` is representable.
    """
    x = np.asarray(x)
    t = np.trunc(x)
    frac = x - t
    return t + np.where(np.abs(frac) >= 0.5, np.sign(x), 0).astype(x.dtype)


def int_range(bit_width: int, signed: bool) -> tuple[int, int]:
    if bit_width not in (4, 8):
        raise ArgumentError(f"bit_width must be 4 or 8, got {bit_width}")
    if signed:
        return -(1 << (bit_width - 1)), (1 << (bit_width - 1)) - 1
    return 0, (1 << bit_width) - 1


@dataclass(frozen=True)
class AffineParams:
    scale: float
    zero_point: int
    bit_width: int = 8
    signed: bool = True

    def __post_init__(self):
        qmin, qmax = int_range(self.bit_width, self.signed)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ArgumentError(f"scale must be finite and positive, got {self.scale}")
        if not qmin <= self.zero_point <= qmax:
            raise ArgumentError(f"zero_point {self.zero_point} outside [{qmin}, {qmax}]")
        object.__setattr__(self, "scale", float(np.float32(self.scale)))

    @property
    def qmin(self) -> int:
        return int_range(self.bit_width, self.signed)[0]

    @property
    def qmax(self) -> int:
        return int_range(self.bit_width, self.signed)[1]


# a subnormal range would give a scale that underflows to 0
_MIN_SCALE = np.float32(np.finfo(np.float32).tiny)


def _as_f32(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise RangeError(f"{what} contains non-finite values")
    return arr


def compute_affine_params(
    values: Sequence[float] | np.ndarray,
    bit_width: int = 8,
    signed: bool = True,
    symmetric: bool = False,
) -> AffineParams:
    """Pick (scale, zero_point) from the min/max (asymmetric) or absmax (symmetric) of ``values``.

    The asymmetric range is widened to include 0 so the zero point is always a
    valid code. A constant input gets ``scale = |c|`` (1 for zeros) and a
    zero point that makes the constant reconstruct exactly.
    """
    arr = np.asarray(values, dtype=np.float32).ravel()
    if arr.size == 0:
        raise ArgumentError("cannot compute affine parameters of an empty sequence")
    arr = _as_f32(arr, "values")
    qmin, qmax = int_range(bit_width, signed)
    vmin, vmax = np.float32(arr.min()), np.float32(arr.max())

    if vmin == vmax:
        c = float(vmin)
        if c == 0.0:
            return AffineParams(1.0, 0, bit_width, signed)
        zero_point = 1 if (c < 0 and not signed) else 0
        return AffineParams(abs(c), zero_point, bit_width, signed)

    if symmetric:
        absmax = np.float32(max(abs(vmin), abs(vmax)))
        zero_point = 0 if signed else (qmax + 1) // 2
        scale = max(absmax / np.float32(qmax - zero_point), _MIN_SCALE)
        return AffineParams(float(scale), zero_point, bit_width, signed)

    lo = min(vmin, np.float32(0))
    hi = max(vmax, np.float32(0))
    scale = max(np.float32((hi - lo) / np.float32(qmax - qmin)), _MIN_SCALE)
    z = round_half_away(np.float32(qmin) - lo / scale)
    zero_point = int(np.clip(z, qmin, qmax))
    return AffineParams(float(scale), zero_point, bit_width, signed)


def quantize_affine(r, params: AffineParams):
    """Map real value(s) to integer code(s). Scalars in, int out; arrays in, int32 array out."""
    arr = _as_f32(r, "r")
    q = round_half_away(arr / np.float32(params.scale)) + params.zero_point
    q = np.clip(q, params.qmin, params.qmax).astype(np.int32)
    return int(q) if q.ndim == 0 else q


def dequantize_affine(q, params: AffineParams):
    """Map integer code(s) back to float32 value(s): ``(q - z) * s``."""
    arr = np.asarray(q)
    if arr.dtype.kind not in "iu":
        if not np.all(arr == np.trunc(arr)):
            raise ArgumentError("codes must be integers")
        arr = arr.astype(np.int64)
    if np.any(arr < params.qmin) or np.any(arr > params.qmax):
        raise ArgumentError(f"code outside [{params.qmin}, {params.qmax}]")
    out = (arr - params.zero_point).astype(np.float32) * np.float32(params.scale)
    return float(out) if out.ndim == 0 else out
