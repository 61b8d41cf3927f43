# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for the convolution hot path.

Column layout is (N, Ho, Wo, C, K, K) flattened to (N*Ho*Wo, C*K*K), which
matches the pure numpy fallback in ``_kernels_py`` element for element.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * ho * wo, c * k * k), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, i, j, ch, ki, kj, row, col, yy, xx
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for ki in range(k):
                            yy = i * stride + ki - pad
                            for kj in range(k):
                                xx = j * stride + kj - pad
                                if 0 <= yy < h and 0 <= xx < w:
                                    cols[row, col] = x[b, ch, yy, xx]
                                col += 1
    return out


def col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int k, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, i, j, ch, ki, kj, row, col, yy, xx
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for ki in range(k):
                            yy = i * stride + ki - pad
                            for kj in range(k):
                                xx = j * stride + kj - pad
                                if 0 <= yy < h and 0 <= xx < w:
                                    dx[b, ch, yy, xx] += cols[row, col]
                                col += 1
    return out
