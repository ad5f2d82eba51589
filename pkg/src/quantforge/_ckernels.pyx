# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in _pykernels.py (same results, bit for bit)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport round, ceil, INFINITY

cnp.import_array()

NAME = "cython"


def nf4_encode(normalized, codebook):
    cdef const float[::1] v = np.ascontiguousarray(normalized, dtype=np.float32).ravel()
    cdef const float[::1] cb = np.ascontiguousarray(codebook, dtype=np.float32)
    out_arr = np.empty(v.shape[0], dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    cdef Py_ssize_t i, n = v.shape[0]
    cdef int k, best_k, ncb = cb.shape[0]
    cdef float d, best_d
    with nogil:
        for i in range(n):
            best_k = 0
            best_d = v[i] - cb[0]
            if best_d < 0:
                best_d = -best_d
            for k in range(1, ncb):
                d = v[i] - cb[k]
                if d < 0:
                    d = -d
                if d < best_d:
                    best_d = d
                    best_k = k
            out[i] = <unsigned char>best_k
    return out_arr


cdef inline double _clip(double v, double qmax) noexcept nogil:
    if v < 0.0:
        return 0.0
    if v > qmax:
        return qmax
    return v


cdef inline void _fit(const float[:, ::1] x, Py_ssize_t row, double* codes, Py_ssize_t m,
                      double qmax, double* scale, double* offset) noexcept nogil:
    cdef double sq = 0.0, sq2 = 0.0, sx = 0.0, sqx = 0.0, c, xv, det, cmax = 0.0, shift
    cdef double n = <double>m
    cdef Py_ssize_t j
    for j in range(m):
        c = codes[j]
        xv = x[row, j]
        if c > cmax:
            cmax = c
        sq = sq + c
        sq2 = sq2 + c * c
        sx = sx + xv
        sqx = sqx + c * xv
    det = n * sq2 - sq * sq
    if det > 0:
        scale[0] = (n * sqx - sq * sx) / det
        offset[0] = (sq2 * sx - sq * sqx) / det
    else:
        scale[0] = 0.0
        offset[0] = sx / n
    if offset[0] > 0 and scale[0] > 0:
        shift = ceil(offset[0] / scale[0])
        if cmax + shift <= qmax:
            offset[0] = offset[0] - shift * scale[0]
    if offset[0] > 0:
        offset[0] = 0.0
        if sq2 > 0:
            scale[0] = sqx / sq2
        else:
            scale[0] = 0.0
    if scale[0] < 0:
        scale[0] = 0.0


cdef inline void _codes(const float[:, ::1] x, Py_ssize_t row, Py_ssize_t m, double scale,
                        double offset, double qmax, double* codes) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(m):
        if scale > 0:
            codes[j] = _clip(round((<double>x[row, j] - offset) / scale), qmax)
        else:
            codes[j] = 0.0


cdef inline double _sse(const float[:, ::1] x, Py_ssize_t row, Py_ssize_t m, double scale,
                        double offset, double qmax, double* codes) noexcept nogil:
    cdef double acc = 0.0, d
    cdef Py_ssize_t j
    _codes(x, row, m, scale, offset, qmax, codes)
    for j in range(m):
        d = (scale * codes[j] + offset) - <double>x[row, j]
        acc = acc + d * d
    return acc


def q4k_search(x, numerators, int iters, int qmax=15):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const double[::1] nums = np.ascontiguousarray(numerators, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], m = xv.shape[1]
    scale_arr = np.empty(rows)
    offset_arr = np.empty(rows)
    cdef double[::1] out_s = scale_arr
    cdef double[::1] out_b = offset_arr
    codes_arr = np.empty(max(m, 1))
    cdef double[::1] codes = codes_arr
    cdef double* cp = &codes[0]
    cdef double dq = <double>qmax
    cdef Py_ssize_t r, j, k
    cdef int it
    cdef double xmin, xmax, rng, iscale, best, err, s, b, bs, bb, v
    with nogil:
        for r in range(rows):
            xmin = xv[r, 0]
            xmax = xv[r, 0]
            for j in range(1, m):
                v = xv[r, j]
                if v < xmin:
                    xmin = v
                if v > xmax:
                    xmax = v
            if xmin > 0:
                xmin = 0.0
            rng = xmax - xmin
            best = INFINITY
            bs = 0.0
            bb = xmin
            for k in range(nums.shape[0]):
                if rng > 0:
                    iscale = nums[k] / rng
                else:
                    iscale = 0.0
                for j in range(m):
                    cp[j] = _clip(round(iscale * (<double>xv[r, j] - xmin)), dq)
                _fit(xv, r, cp, m, dq, &s, &b)
                err = _sse(xv, r, m, s, b, dq, cp)
                if err < best:
                    best = err
                    bs = s
                    bb = b
            for it in range(iters):
                _codes(xv, r, m, bs, bb, dq, cp)
                _fit(xv, r, cp, m, dq, &s, &b)
                err = _sse(xv, r, m, s, b, dq, cp)
                if err < best:
                    best = err
                    bs = s
                    bb = b
            out_s[r] = bs
            out_b[r] = bb
    return scale_arr, offset_arr
