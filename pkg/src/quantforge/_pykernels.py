"""Pure-numpy implementations of the hot kernels.

Must stay bit-identical to ``_ckernels.pyx``: reductions over a sub-block run
as explicit left-to-right loops (numpy's pairwise ``sum`` would round
differently), and every expression keeps the same operation order.
"""

from __future__ import annotations

import numpy as np

from .affine import round_half_away

NAME = "numpy"

_NF4_CHUNK = 1 << 18
_Q4K_CHUNK = 1 << 15


def nf4_encode(normalized: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook entry per element (first index on ties)."""
    v = np.ascontiguousarray(normalized, dtype=np.float32).ravel()
    cb = np.ascontiguousarray(codebook, dtype=np.float32)
    out = np.empty(v.size, dtype=np.uint8)
    for start in range(0, v.size, _NF4_CHUNK):
        chunk = v[start : start + _NF4_CHUNK]
        dist = np.abs(chunk[:, None] - cb[None, :])
        out[start : start + chunk.size] = np.argmin(dist, axis=1)
    return out


def _fit(xt, codes, n, qmax):
    sq = np.zeros(xt.shape[1])
    sq2 = np.zeros(xt.shape[1])
    sx = np.zeros(xt.shape[1])
    sqx = np.zeros(xt.shape[1])
    for j in range(xt.shape[0]):
        c = codes[j]
        x = xt[j]
        sq += c
        sq2 += c * c
        sx += x
        sqx += c * x
    cmax = codes.max(axis=0)
    det = n * sq2 - sq * sq
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = det > 0
        scale = np.where(pos, (n * sqx - sq * sx) / det, 0.0)
        offset = np.where(pos, (sq2 * sx - sq * sqx) / det, sx / n)
        # a positive offset becomes a whole-code shift when the codes have headroom
        shift = np.where(scale > 0, np.ceil(offset / scale), 0.0)
        shifted = (offset > 0) & (scale > 0) & (cmax + shift <= qmax)
        offset = np.where(shifted, offset - shift * scale, offset)
        clamp = offset > 0
        offset = np.where(clamp, 0.0, offset)
        scale = np.where(clamp, np.where(sq2 > 0, sqx / sq2, 0.0), scale)
    scale = np.where(scale < 0, 0.0, scale)
    return scale, offset


def _codes(xt, scale, offset, qmax):
    with np.errstate(divide="ignore", invalid="ignore"):
        c = round_half_away((xt - offset) / scale)
    c = np.where(scale > 0, c, 0.0)
    return np.clip(c, 0.0, qmax)


def _sse(xt, scale, offset, qmax):
    codes = _codes(xt, scale, offset, qmax)
    acc = np.zeros(xt.shape[1])
    for j in range(xt.shape[0]):
        d = (scale * codes[j] + offset) - xt[j]
        acc += d * d
    return acc


def _q4k_chunk(xt, numerators, iters, qmax):
    n = float(xt.shape[0])
    xmin = xt.min(axis=0)
    xmin = np.where(xmin > 0, 0.0, xmin)
    xmax = xt.max(axis=0)
    rng = xmax - xmin
    best = np.full(xt.shape[1], np.inf)
    best_scale = np.zeros(xt.shape[1])
    best_offset = xmin.copy()

    def consider(scale, offset):
        nonlocal best, best_scale, best_offset
        err = _sse(xt, scale, offset, qmax)
        better = err < best
        best = np.where(better, err, best)
        best_scale = np.where(better, scale, best_scale)
        best_offset = np.where(better, offset, best_offset)

    for num in numerators:
        with np.errstate(divide="ignore", invalid="ignore"):
            iscale = np.where(rng > 0, num / rng, 0.0)
        codes = np.clip(round_half_away(iscale * (xt - xmin)), 0.0, qmax)
        consider(*_fit(xt, codes, n, qmax))
    for _ in range(iters):
        codes = _codes(xt, best_scale, best_offset, qmax)
        consider(*_fit(xt, codes, n, qmax))
    return best_scale, best_offset


def q4k_search(x: np.ndarray, numerators: np.ndarray, iters: int, qmax: int = 15):
    """Per-row (scale, offset) for ``x ~ scale * q + offset``, q in [0, qmax], offset <= 0."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    nums = np.ascontiguousarray(numerators, dtype=np.float64)
    scale = np.empty(x.shape[0])
    offset = np.empty(x.shape[0])
    for start in range(0, x.shape[0], _Q4K_CHUNK):
        xt = x[start : start + _Q4K_CHUNK].astype(np.float64).T.copy()
        s, b = _q4k_chunk(xt, nums, iters, float(qmax))
        scale[start : start + xt.shape[1]] = s
        offset[start : start + xt.shape[1]] = b
    return scale, offset
