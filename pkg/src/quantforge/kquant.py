"""GGUF block formats (Q8_0, Q4_K, Q6_K) and scalar F32/F16/BF16 conversion.

Block layouts follow the ggml ``block_q8_0`` / ``block_q4_K`` / ``block_q6_K``
structs byte for byte, so files written here dequantize identically in other
GGUF readers. The quantizers themselves are not bit-identical to llama.cpp's.
"""

from __future__ import annotations

import numpy as np

from . import kernels, nf4
from .affine import round_half_away
from .core import QuantType
from .errors import ArgumentError, RangeError

QK8_0 = 32
QK_K = 256
K_SCALE_SIZE = 12

Q8_0_BLOCK = np.dtype([("d", "<f2"), ("qs", "i1", (QK8_0,))])
Q4_K_BLOCK = np.dtype(
    [("d", "<f2"), ("dmin", "<f2"), ("scales", "u1", (K_SCALE_SIZE,)), ("qs", "u1", (QK_K // 2,))]
)
Q6_K_BLOCK = np.dtype(
    [("ql", "u1", (QK_K // 2,)), ("qh", "u1", (QK_K // 4,)), ("scales", "i1", (QK_K // 16,)), ("d", "<f2")]
)

# Q4_K (scale, min) search: candidate inverse scales are num / (max - min).
# 14..16 in 0.1 steps covers the usual optimum; whole-code spans 1..14 let the
# search land exactly on data that is already on a 4-bit lattice.
Q4K_NUMERATORS = np.array([15.0 + 0.2 * k for k in range(-5, 6)] + [float(n) for n in range(1, 15)])
Q4K_ITERS = 3
_STABILIZE_ROUNDS = 8

F16_MAX = float(np.finfo(np.float16).max)
BF16_MAX = float(np.array([0x7F7F0000], dtype=np.uint32).view(np.float32)[0])


def _check(row, block: int, fmt: str) -> np.ndarray:
    x = np.asarray(row, dtype=np.float32).ravel()
    if x.size % block:
        raise ArgumentError(f"{fmt} needs a multiple of {block} elements, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise RangeError(f"{fmt} input contains non-finite values")
    return x


def _as_blocks(data, dtype: np.dtype) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == dtype:
        return data
    buf = memoryview(data).cast("B")
    if len(buf) % dtype.itemsize:
        raise ArgumentError(f"data length {len(buf)} is not a multiple of the {dtype.itemsize}-byte block")
    return np.frombuffer(buf, dtype=dtype)


def _to_f16(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float32), -F16_MAX, F16_MAX).astype(np.float16)


def _stabilize(x: np.ndarray, once, dequant) -> np.ndarray:
    """Quantize rows of ``x`` so that re-quantizing the reconstruction is a no-op.

    Rounding of the fp16/6-bit/8-bit scales can leave a block whose own
    reconstruction encodes differently (two encodings of the same points, or a
    subnormal fp16 scale). Such blocks are replaced by the encoding of their
    reconstruction until they stop moving; typical data needs no extra round.
    """
    blocks = once(x)
    recon = dequant(blocks).reshape(x.shape)
    todo = np.arange(x.shape[0])
    for _ in range(_STABILIZE_ROUNDS):
        again = once(recon[todo])
        recon2 = dequant(again).reshape(-1, x.shape[1])
        moved = (recon2 != recon[todo]).any(axis=1)
        if not moved.any():
            break
        todo = todo[moved]
        blocks[todo] = again[moved]
        recon[todo] = recon2[moved]
    return blocks


# --- Q8_0 ------------------------------------------------------------------


def quantize_q8_0(row) -> np.ndarray:
    x = _check(row, QK8_0, "Q8_0").reshape(-1, QK8_0)
    return _stabilize(x, _quantize_q8_0_once, dequantize_q8_0)


def _quantize_q8_0_once(x) -> np.ndarray:
    d = _to_f16(np.abs(x).max(axis=1) / np.float32(127))
    d32 = d.astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(d32[:, None] > 0, round_half_away(x / d32[:, None]), 0)
    blocks = np.zeros(x.shape[0], dtype=Q8_0_BLOCK)
    blocks["d"] = d
    blocks["qs"] = np.clip(q, -127, 127)
    return blocks


def dequantize_q8_0(blocks) -> np.ndarray:
    b = _as_blocks(blocks, Q8_0_BLOCK)
    return (b["qs"].astype(np.float32) * b["d"].astype(np.float32)[:, None]).ravel()


# --- Q4_K ------------------------------------------------------------------


def pack_scale_min(sc: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Pack (n, 8) 6-bit sub-scales and sub-mins into (n, 12) bytes."""
    sc = np.asarray(sc, dtype=np.uint8)
    m = np.asarray(m, dtype=np.uint8)
    out = np.empty(sc.shape[:-1] + (K_SCALE_SIZE,), dtype=np.uint8)
    out[..., 0:4] = (sc[..., 0:4] & 63) | ((sc[..., 4:8] >> 4) << 6)
    out[..., 4:8] = (m[..., 0:4] & 63) | ((m[..., 4:8] >> 4) << 6)
    out[..., 8:12] = (sc[..., 4:8] & 0x0F) | ((m[..., 4:8] & 0x0F) << 4)
    return out


def unpack_scale_min(scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(scales, dtype=np.uint8)
    sc = np.empty(b.shape[:-1] + (8,), dtype=np.uint8)
    m = np.empty_like(sc)
    sc[..., 0:4] = b[..., 0:4] & 63
    m[..., 0:4] = b[..., 4:8] & 63
    sc[..., 4:8] = (b[..., 8:12] & 0x0F) | ((b[..., 0:4] >> 6) << 4)
    m[..., 4:8] = (b[..., 8:12] >> 4) | ((b[..., 4:8] >> 6) << 4)
    return sc, m


def _encode_6bit(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Super-scale (fp16) and 6-bit multipliers for each row of non-negative values."""
    sup = _to_f16(values.max(axis=1) / np.float32(63))
    sup32 = sup.astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        mult = np.where(sup32[:, None] > 0, round_half_away(values / sup32[:, None]), 0)
    return sup, np.clip(mult, 0, 63).astype(np.uint8)


def q4_k_subblock_params(sub: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Float (scale, min) per 32-element row, with ``x ~ scale * q - min``, both >= 0."""
    scale, offset = kernels.q4k_search(sub, Q4K_NUMERATORS, Q4K_ITERS)
    return scale.astype(np.float32), (-offset).astype(np.float32)


def _canonical_shift(x: np.ndarray, scale: np.ndarray, mins: np.ndarray) -> np.ndarray:
    """Lower each min by whole scale steps until the smallest element takes code 0.

    Reconstructions are unchanged; this picks one representative of the
    code-shift ambiguity so re-quantizing dequantized data finds the same one.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        lowest = round_half_away((x.min(axis=2) + mins) / scale)
        room = np.floor(mins / scale)
    shift = np.where(scale > 0, np.clip(np.minimum(lowest, room), 0, None), 0)
    return (mins - shift * scale).astype(np.float32)


def _q4_k_codes(x, eff_scale, eff_min):
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(eff_scale > 0, round_half_away((x + eff_min) / eff_scale), 0)
    return np.clip(q, 0, 15)


def _shiftable(x, eff_scale, dmin, m):
    """Sub-blocks whose codes could all drop by one with the min lowered by one scale step."""
    eff_min = (dmin.astype(np.float32)[:, None] * m.astype(np.float32))[:, :, None]
    lowest = _q4_k_codes(x, eff_scale, eff_min).min(axis=2)
    return (lowest > 0) & (eff_min[:, :, 0] >= eff_scale[:, :, 0]) & (eff_scale[:, :, 0] > 0)


def _refine_scales(x, d, sc, dmin, m):
    """Move each 6-bit sub-block scale by up to 2 steps if that lowers the error.

    Several scales can fit a sparse sub-block exactly before 6-bit rounding;
    judging candidates after rounding lets a reconstruction find its own code.
    """
    eff_min = (dmin.astype(np.float32)[:, None] * m.astype(np.float32))[:, :, None]
    d32 = d.astype(np.float32)[:, None]
    best_sc = sc
    best_err = None
    for step in (0, -1, 1, -2, 2):
        cand = np.clip(sc.astype(np.int16) + step, 0, 63).astype(np.uint8)
        eff = (d32 * cand.astype(np.float32))[:, :, None]
        q = _q4_k_codes(x, eff, eff_min)
        err = np.square(eff * q.astype(np.float32) - eff_min - x).sum(axis=2, dtype=np.float64)
        if best_err is None:
            best_err = err
            continue
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_sc = np.where(better, cand, best_sc)
    return best_sc.astype(np.uint8)


def _quantize_q4_k_once(x) -> np.ndarray:
    x = x.reshape(-1, 8, 32)
    nb = x.shape[0]
    scale, mins = q4_k_subblock_params(x.reshape(-1, 32))
    scale = scale.reshape(nb, 8)
    mins = _canonical_shift(x, scale, np.maximum(mins.reshape(nb, 8), np.float32(0)))

    d, sc = _encode_6bit(scale)
    dmin, m = _encode_6bit(mins)
    sc = _refine_scales(x, d, sc, dmin, m)
    eff_scale = (d.astype(np.float32)[:, None] * sc.astype(np.float32))[:, :, None]

    # Keep the canonical form (no whole-code downward shift possible: min code 0
    # or min < scale) through 6-bit rounding. Sub-blocks at m = 63 fix dmin, so
    # for them dmin is nudged down by fp16 ulps; the others step m down.
    for _ in range(8):
        bad = (_shiftable(x, eff_scale, dmin, m) & (m == 63)).any(axis=1)
        if not bad.any():
            break
        dmin = np.where(bad, np.nextafter(dmin, np.float16(0)), dmin)
        with np.errstate(divide="ignore", invalid="ignore"):
            m_new = round_half_away(mins / dmin.astype(np.float32)[:, None])
        m_new = np.clip(np.where(dmin[:, None] > 0, m_new, 0), 0, 63)
        m = np.where(bad[:, None], m_new, m).astype(np.uint8)
    dmin32 = dmin.astype(np.float32)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        xmin = x.min(axis=2)
        limit = np.maximum(eff_scale[:, :, 0], np.float32(0.5) * eff_scale[:, :, 0] - xmin) / dmin32
    target = np.clip(np.where(dmin32 > 0, np.ceil(limit) - 1, 0), 0, 63)
    for _ in range(4):
        bad = _shiftable(x, eff_scale, dmin, m) & (m < 63)
        if not bad.any():
            break
        m = np.where(bad, np.minimum(m - 1, target), m).astype(np.uint8)
        target = target - 1

    eff_min = (dmin32 * m.astype(np.float32))[:, :, None]
    q = _q4_k_codes(x, eff_scale, eff_min).astype(np.uint8).reshape(nb, 4, 2, 32)

    blocks = np.zeros(nb, dtype=Q4_K_BLOCK)
    blocks["d"] = d
    blocks["dmin"] = dmin
    blocks["scales"] = pack_scale_min(sc, m)
    # each 32-byte group holds sub-block 2g in the low nibbles, 2g+1 in the high
    blocks["qs"] = (q[:, :, 0, :] | (q[:, :, 1, :] << 4)).reshape(nb, QK_K // 2)
    return blocks


def quantize_q4_k(row) -> np.ndarray:
    """Quantize to Q4_K records (see :func:`_stabilize`)."""
    x = _check(row, QK_K, "Q4_K").reshape(-1, QK_K)
    return _stabilize(x, _quantize_q4_k_once, dequantize_q4_k)


def dequantize_q4_k(blocks) -> np.ndarray:
    b = _as_blocks(blocks, Q4_K_BLOCK)
    nb = b.shape[0]
    sc, m = unpack_scale_min(b["scales"])
    d = (b["d"].astype(np.float32)[:, None] * sc.astype(np.float32))[:, :, None]
    dm = (b["dmin"].astype(np.float32)[:, None] * m.astype(np.float32))[:, :, None]
    qs = b["qs"].reshape(nb, 4, 1, 32)
    q = np.concatenate([qs & 0x0F, qs >> 4], axis=2).reshape(nb, 8, 32).astype(np.float32)
    return (d * q - dm).ravel()


# --- Q6_K ------------------------------------------------------------------


def quantize_q6_k(row) -> np.ndarray:
    x = _check(row, QK_K, "Q6_K").reshape(-1, QK_K)
    return _stabilize(x, _quantize_q6_k_once, dequantize_q6_k)


def _q6_k_top_code(x, d32, scales):
    eff = (d32[:, None] * scales.astype(np.float32))[:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(eff > 0, round_half_away(x / eff), 0)
    return np.abs(q).max(axis=2)


def _quantize_q6_k_once(x) -> np.ndarray:
    x = x.reshape(-1, 16, 16)
    nb = x.shape[0]
    sub_scale = np.abs(x).max(axis=2) / np.float32(31)
    d = _to_f16(sub_scale.max(axis=1) / np.float32(127))
    d32 = d.astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        scales = np.where(d32[:, None] > 0, round_half_away(sub_scale / d32[:, None]), 0)
    scales = np.clip(scales, 0, 127).astype(np.int8)
    # Re-quantizing a reconstruction recovers a sub-block scale only when the
    # sub-block's largest code magnitude is exactly 31. When rounding missed 31,
    # move the scale to a neighbour that reaches it (saturating at +-31).
    top = _q6_k_top_code(x, d32, scales)
    chosen = scales.copy()
    up = np.clip(scales.astype(np.int16) + 1, 1, 127).astype(np.int8)
    chosen = np.where((top > 31) & (_q6_k_top_code(x, d32, up) == 31), up, chosen)
    for step in (2, 1):
        down = np.clip(scales.astype(np.int16) - step, 1, 127).astype(np.int8)
        ok = (top < 31) & (scales > 1) & (_q6_k_top_code(x, d32, down) >= 31)
        chosen = np.where(ok, down, chosen)
    scales = chosen
    eff = (d32[:, None] * scales.astype(np.float32))[:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(eff > 0, round_half_away(x / eff), 0)
    # zero-scale sub-blocks store code 0 (not the offset 32) so zero blocks are zero bytes
    q = np.where(eff > 0, np.clip(q, -31, 31) + 32, 0).astype(np.uint8).reshape(nb, 2, 4, 32)

    blocks = np.zeros(nb, dtype=Q6_K_BLOCK)
    # per 128-element half: ql byte l holds groups 0|2, byte 32+l groups 1|3;
    # qh byte l holds the top two bits of all four groups
    low = q & 0x0F
    ql = np.concatenate([low[:, :, 0] | (low[:, :, 2] << 4), low[:, :, 1] | (low[:, :, 3] << 4)], axis=2)
    high = q >> 4
    qh = high[:, :, 0] | (high[:, :, 1] << 2) | (high[:, :, 2] << 4) | (high[:, :, 3] << 6)
    blocks["ql"] = ql.reshape(nb, -1)
    blocks["qh"] = qh.reshape(nb, -1)
    blocks["scales"] = scales
    blocks["d"] = d
    return blocks


def dequantize_q6_k(blocks) -> np.ndarray:
    b = _as_blocks(blocks, Q6_K_BLOCK)
    nb = b.shape[0]
    ql = b["ql"].reshape(nb, 2, 2, 32)
    qh = b["qh"].reshape(nb, 2, 1, 32)
    low = np.stack([ql[:, :, 0] & 0x0F, ql[:, :, 1] & 0x0F, ql[:, :, 0] >> 4, ql[:, :, 1] >> 4], axis=2)
    high = (qh >> np.array([0, 2, 4, 6], dtype=np.uint8).reshape(1, 1, 4, 1)) & 3
    q = (low | (high << 4)).astype(np.float32).reshape(nb, 16, 16) - np.float32(32)
    eff = b["d"].astype(np.float32)[:, None] * b["scales"].astype(np.float32)
    return (eff[:, :, None] * q).ravel()


# --- scalar types ----------------------------------------------------------


def f32_to_bf16_bits(x) -> np.ndarray:
    """Round-to-nearest-even float32 -> bfloat16 bit patterns (saturating at +-max)."""
    x = np.clip(np.asarray(x, dtype=np.float32), -BF16_MAX, BF16_MAX)
    bits = x.view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def bf16_bits_to_f32(bits) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def convert_scalar(row, target: QuantType) -> bytes:
    """Encode float values as little-endian F32, F16 or BF16 bytes."""
    x = np.asarray(row, dtype=np.float32).ravel()
    if not np.all(np.isfinite(x)):
        raise RangeError("scalar conversion input contains non-finite values")
    if target is QuantType.F32:
        return x.astype("<f4").tobytes()
    if target is QuantType.F16:
        return _to_f16(x).astype("<f2").tobytes()
    if target is QuantType.BF16:
        return f32_to_bf16_bits(x).astype("<u2").tobytes()
    raise ArgumentError(f"{target.tag} is not a scalar type")


def decode_scalar(data, source: QuantType) -> np.ndarray:
    buf = memoryview(data).cast("B")
    if source is QuantType.F32:
        return np.frombuffer(buf, dtype="<f4").astype(np.float32)
    if source is QuantType.F16:
        return np.frombuffer(buf, dtype="<f2").astype(np.float32)
    if source is QuantType.BF16:
        return bf16_bits_to_f32(np.frombuffer(buf, dtype="<u2"))
    raise ArgumentError(f"{source.tag} is not a scalar type")


# --- dispatch --------------------------------------------------------------

_QUANTIZERS = {
    QuantType.Q8_0: (quantize_q8_0, dequantize_q8_0),
    QuantType.Q4_K: (quantize_q4_k, dequantize_q4_k),
    QuantType.Q6_K: (quantize_q6_k, dequantize_q6_k),
    QuantType.NF4: (nf4.quantize_nf4, nf4.dequantize_nf4),
}


def quantize(values, qtype: QuantType) -> bytes:
    """Encode a flat float array in ``qtype``; the result is ``qtype.nbytes(n)`` long."""
    if qtype.is_scalar:
        return convert_scalar(values, qtype)
    return _QUANTIZERS[qtype][0](values).tobytes()


def dequantize(data, qtype: QuantType) -> np.ndarray:
    if qtype.is_scalar:
        return decode_scalar(data, qtype)
    return _QUANTIZERS[qtype][1](data)
