"""NF4: 4-bit normal-float codes with a float32 absmax per 64-element block."""

from __future__ import annotations

from functools import lru_cache
from statistics import NormalDist

import numpy as np

from . import kernels
from .errors import ArgumentError, RangeError

BLOCK_ELEMS = 64
BLOCK_BYTES = 36
ZERO_CODE = 7

# 4-byte absmax followed by 32 bytes of packed codes (low nibble = even element)
NF4_BLOCK = np.dtype([("absmax", "<f4"), ("qs", "u1", (BLOCK_ELEMS // 2,))])

# the asymmetric quantile offset: the outermost of 8 positive quantiles sits
# halfway between the two quantile grids 1 - 1/(2*15) and 1 - 1/(2*16)
_OFFSET = 0.5 * (1 - 1 / 30 + 1 - 1 / 32)


@lru_cache(maxsize=None)
def _codebook() -> tuple[float, ...]:
    nd = NormalDist()

    def linspace(a, b, n):
        return [a + (b - a) * i / (n - 1) for i in range(n)]

    positive = [nd.inv_cdf(p) for p in linspace(_OFFSET, 0.5, 9)[:-1]]
    negative = [-nd.inv_cdf(p) for p in linspace(_OFFSET, 0.5, 8)[:-1]]
    values = sorted(positive + [0.0] + negative)
    top = max(values)
    return tuple(float(np.float32(v / top)) for v in values)


def build_nf4_codebook() -> np.ndarray:
    """The 16 NF4 levels, ascending: -1 at index 0, exact 0 at index 7, +1 at index 15.

    Seven negative and eight positive standard-normal quantiles, each side
    scaled so its extreme is exactly +-1.
    """
    return np.array(_codebook(), dtype=np.float32)


def max_gap() -> float:
    return float(np.diff(build_nf4_codebook()).max())


def _check_row(row) -> np.ndarray:
    x = np.asarray(row, dtype=np.float32).ravel()
    if x.size % BLOCK_ELEMS:
        raise ArgumentError(f"NF4 needs a multiple of {BLOCK_ELEMS} elements, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise RangeError("NF4 input contains non-finite values")
    return x


def quantize_nf4(row) -> np.ndarray:
    """Quantize to an array of :data:`NF4_BLOCK` records."""
    x = _check_row(row).reshape(-1, BLOCK_ELEMS)
    absmax = np.abs(x).max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        normalized = np.where(absmax[:, None] > 0, x / absmax[:, None], np.float32(0))
    codes = kernels.nf4_encode(normalized, build_nf4_codebook()).reshape(x.shape)

    blocks = np.zeros(x.shape[0], dtype=NF4_BLOCK)
    blocks["absmax"] = absmax
    blocks["qs"] = codes[:, 0::2] | (codes[:, 1::2] << 4)
    return blocks


def unpack_codes(blocks: np.ndarray) -> np.ndarray:
    qs = as_blocks(blocks)["qs"]
    codes = np.empty((qs.shape[0], BLOCK_ELEMS), dtype=np.uint8)
    codes[:, 0::2] = qs & 0x0F
    codes[:, 1::2] = qs >> 4
    return codes


def as_blocks(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == NF4_BLOCK:
        return data
    buf = memoryview(data).cast("B")
    if len(buf) % BLOCK_BYTES:
        raise ArgumentError(f"NF4 data length {len(buf)} is not a multiple of {BLOCK_BYTES}")
    return np.frombuffer(buf, dtype=NF4_BLOCK)


def dequantize_nf4(blocks) -> np.ndarray:
    """float32 values ``codebook[code] * absmax``, flattened."""
    blocks = as_blocks(blocks)
    values = build_nf4_codebook()[unpack_codes(blocks)]
    return (values * blocks["absmax"][:, None]).ravel()
