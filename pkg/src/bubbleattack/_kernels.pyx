# cython: language_level=3
"""Compiled hot kernels. Output is bit-identical to ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, rint, isfinite, copysign, INFINITY
from libc.stdint cimport uint64_t, uint8_t, int64_t

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double MIN_NORMAL32 = 2.0 ** -126
cdef double SUBNORMAL_STEP_TF32 = 2.0 ** -136
cdef double OVERFLOW32 = 2.0 ** 128


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (w - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, kh, kw, ho, wo), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch, a, bb
    with nogil:
        for b in range(n):
            for ch in range(c):
                for a in range(kh):
                    for bb in range(kw):
                        for i in range(ho):
                            for j in range(wo):
                                out[b, ch, a, bb, i, j] = x[b, ch, i * stride + a, j * stride + bb]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] cols, Py_ssize_t height, Py_ssize_t width, Py_ssize_t stride):
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1], kh = cols.shape[2]
    cdef Py_ssize_t kw = cols.shape[3], ho = cols.shape[4], wo = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, height, width), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch, a, bb
    # per output cell, contributions arrive in ascending (a, bb) order,
    # the same order as the fallback's slice additions
    with nogil:
        for b in range(n):
            for ch in range(c):
                for a in range(kh):
                    for bb in range(kw):
                        for i in range(ho):
                            for j in range(wo):
                                out[b, ch, i * stride + a, j * stride + bb] += cols[b, ch, a, bb, i, j]
    return out_arr


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef real best, v
    cdef uint8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, 2 * i, 2 * j]
                        k = 0
                        v = x[b, ch, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = k
    return out_arr, idx_arr


def maxpool2_backward(real[:, :, :, ::1] grad_out, const uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j
    cdef uint8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        k = idx[b, ch, i, j]
                        out[b, ch, 2 * i + (k >> 1), 2 * j + (k & 1)] = grad_out[b, ch, i, j]
    return out_arr


cdef inline double _round_one(double v) nogil:
    cdef uint64_t bits
    cdef double r
    if not isfinite(v):
        return v
    if fabs(v) < MIN_NORMAL32:
        return rint(v / SUBNORMAL_STEP_TF32) * SUBNORMAL_STEP_TF32
    bits = (<uint64_t*>&v)[0]
    bits = (bits + ((<uint64_t>1 << 41) - 1) + ((bits >> 42) & 1)) & ~((<uint64_t>1 << 42) - 1)
    r = (<double*>&bits)[0]
    if fabs(r) >= OVERFLOW32:
        return copysign(INFINITY, r)
    return r


def round_reduced(x):
    arr = np.array(x, dtype=np.float64, copy=True)
    cdef double[::1] flat = arr.reshape(-1)
    cdef Py_ssize_t i, m = flat.shape[0]
    with nogil:
        for i in range(m):
            flat[i] = _round_one(flat[i])
    return arr


def error_diffusion(darkness, carry=None, Py_ssize_t row0=0):
    arr = np.array(darkness, dtype=np.float64, copy=True)
    cdef double[:, ::1] d = arr
    cdef Py_ssize_t h = d.shape[0], w = d.shape[1]
    spill_arr = np.zeros(w, dtype=np.float64)
    cdef double[::1] spill = spill_arr
    cdef double[::1] cin
    cdef Py_ssize_t i, t, j, jn, jp, step
    if carry is not None:
        cin = np.ascontiguousarray(carry, dtype=np.float64)
        for j in range(w):
            d[0, j] += cin[j]
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef uint8_t[:, ::1] out = out_arr
    cdef double old, ink, err
    cdef double* nxt
    with nogil:
        for i in range(h):
            step = 1 if (row0 + i) % 2 == 0 else -1
            nxt = &d[i + 1, 0] if i + 1 < h else &spill[0]
            for t in range(w):
                j = t if step == 1 else w - 1 - t
                old = d[i, j]
                ink = 1.0 if old >= 0.5 else 0.0
                out[i, j] = 1 if ink != 0.0 else 0
                err = old - ink
                jn = j + step
                jp = j - step
                if 0 <= jn < w:
                    d[i, jn] += err * 0.4375
                if 0 <= jp < w:
                    nxt[jp] += err * 0.1875
                nxt[j] += err * 0.3125
                if 0 <= jn < w:
                    nxt[jn] += err * 0.0625
    return out_arr, spill_arr


def box_downsample(const uint8_t[:, ::1] raster, Py_ssize_t factor):
    cdef Py_ssize_t h = raster.shape[0] // factor, w = raster.shape[1] // factor
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, a, b
    cdef int64_t s
    cdef double area = <double>(factor * factor)
    with nogil:
        for i in range(h):
            for j in range(w):
                s = 0
                for a in range(factor):
                    for b in range(factor):
                        s += raster[i * factor + a, j * factor + b]
                out[i, j] = s / area
    return out_arr
