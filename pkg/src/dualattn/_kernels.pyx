# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(x, int kh, int kw, int stride):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (w - kw) // stride + 1
    out = np.empty((n, ho, wo, c * kh * kw), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t i, oy, ox, ch, a, b, k, y0, x0
    with nogil:
        for i in range(n):
            for oy in range(ho):
                y0 = oy * stride
                for ox in range(wo):
                    x0 = ox * stride
                    k = 0
                    for ch in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                ov[i, oy, ox, k] = xv[i, ch, y0 + a, x0 + b]
                                k += 1
    return out


def col2im(cols, shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (w - kw) // stride + 1
    cdef double[:, :, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(n, ho, wo, c * kh * kw)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t i, oy, ox, ch, a, b, k, y0, x0
    with nogil:
        for i in range(n):
            for oy in range(ho):
                y0 = oy * stride
                for ox in range(wo):
                    x0 = ox * stride
                    k = 0
                    for ch in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                ov[i, ch, y0 + a, x0 + b] += cv[i, oy, ox, k]
                                k += 1
    return out


def ranked_average_precision(relevant):
    cdef double[::1] rel = np.ascontiguousarray(relevant, dtype=np.float64)
    cdef Py_ssize_t i, m = rel.shape[0]
    cdef double hits = 0.0, acc = 0.0
    with nogil:
        for i in range(m):
            if rel[i] != 0.0:
                hits += 1.0
                acc += hits / (i + 1)
    if hits == 0.0:
        return 0.0
    return acc / hits
