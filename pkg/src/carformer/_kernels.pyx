# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row kernels for softmax and layer normalization.

All kernels operate on C-contiguous float64 matrices of shape (rows, cols)
and reduce over the last axis. Callers reshape higher-rank arrays first.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, total, v
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            if x[i, j] > mx:
                mx = x[i, j]
        total = 0.0
        for j in range(m):
            v = exp(x[i, j] - mx)
            y[i, j] = v
            total += v
        for j in range(m):
            y[i, j] = y[i, j] / total
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gx = out
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain,
                       const double[::1] bias, double eps):
    """Return (y, xhat, rstd)."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mean, var, d, r
    out = np.empty((n, m), dtype=np.float64)
    xh = np.empty((n, m), dtype=np.float64)
    rs = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xh
    cdef double[::1] rstd = rs
    for i in range(n):
        mean = 0.0
        for j in range(m):
            mean += x[i, j]
        mean = mean / m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mean
            var += d * d
        var = var / m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            d = (x[i, j] - mean) * r
            xhat[i, j] = d
            y[i, j] = d * gain[j] + bias[j]
    return out, xh, rs


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gain):
    """Return (gx, ggain, gbias)."""
    cdef Py_ssize_t n = gy.shape[0], m = gy.shape[1], i, j
    cdef double s1, s2, g
    gx_arr = np.empty((n, m), dtype=np.float64)
    gg_arr = np.zeros(m, dtype=np.float64)
    gb_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            g = gy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
        s1 = s1 / m
        s2 = s2 / m
        for j in range(m):
            gx[i, j] = rstd[i] * (gy[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return gx_arr, gg_arr, gb_arr
