# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels (see ``_fallback.py``)."""

import numpy as np
cimport cython
from cython cimport floating


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((b * ho * wo, c * k * k), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t n, oy, ox, ch, i, j, row, col, iy, ix
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    row = (n * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            iy = oy * stride + i - pad
                            for j in range(k):
                                ix = ox * stride + j - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, col] = x[n, ch, iy, ix]
                                else:
                                    cols[row, col] = 0
                                col = col + 1
    return out


def col2im(floating[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] img = out
    cdef Py_ssize_t n, oy, ox, ch, i, j, iy, ix
    # (i, j) outermost per pixel to match the fallback's summation order
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                img[n, ch, iy, ix] += cols[
                                    (n * ho + oy) * wo + ox, (ch * k + i) * k + j
                                ]
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((b, c, ho, wo), dtype=dtype)
    arg = np.empty((b, c, ho, wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] o = out
    cdef signed char[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, ch, y, xx, q
    cdef floating best, v
    cdef signed char bi
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best = x[n, ch, 2 * y, 2 * xx]
                        bi = 0
                        for q in range(1, 4):
                            v = x[n, ch, 2 * y + q // 2, 2 * xx + q % 2]
                            if v > best:
                                best = v
                                bi = <signed char>q
                        o[n, ch, y, xx] = best
                        a[n, ch, y, xx] = bi
    return out, arg


def maxpool2_backward(floating[:, :, :, ::1] g, signed char[:, :, :, ::1] arg, shape):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros(tuple(shape), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t n, ch, y, xx, q
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        q = arg[n, ch, y, xx]
                        o[n, ch, 2 * y + q // 2, 2 * xx + q % 2] = g[n, ch, y, xx]
    return out
