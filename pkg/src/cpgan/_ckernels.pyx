# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels for NCHW convolution."""

import numpy as np
cimport numpy as cnp
cimport cython

ctypedef fused real:
    float
    double


cdef void _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] cols,
                  int kh, int kw, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, r, s, row, hi, wi, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    col = 0
                    for r in range(oh):
                        hi = r * stride + i - pad
                        if hi < 0 or hi >= H:
                            for s in range(ow):
                                cols[n, row, col] = 0
                                col += 1
                            continue
                        for s in range(ow):
                            wi = s * stride + j - pad
                            if wi < 0 or wi >= W:
                                cols[n, row, col] = 0
                            else:
                                cols[n, row, col] = x[n, c, hi, wi]
                            col += 1


cdef void _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] x,
                  int kh, int kw, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, r, s, row, hi, wi, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for r in range(oh):
                        hi = r * stride + i - pad
                        if hi < 0 or hi >= H:
                            continue
                        col = r * ow
                        for s in range(ow):
                            wi = s * stride + j - pad
                            if wi >= 0 and wi < W:
                                x[n, c, hi, wi] += cols[n, row, col + s]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int oh = (H + 2 * pad - kh) // stride + 1
    cdef int ow = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((N, C * kh * kw, oh * ow), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, pad, oh, ow)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols, oh, ow


def col2im(cols, tuple shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    cdef int N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef int oh = (H + 2 * pad - kh) // stride + 1
    cdef int ow = (W + 2 * pad - kw) // stride + 1
    x = np.zeros(shape, dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, x, kh, kw, stride, pad, oh, ow)
    elif cols.dtype == np.float64:
        _col2im[double](cols, x, kh, kw, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return x


cdef void _softmax_rows_grad(const real[:, ::1] y, real[:, ::1] g) noexcept nogil:
    cdef Py_ssize_t r, j, R = y.shape[0], C = y.shape[1]
    cdef real dot
    for r in range(R):
        dot = 0
        for j in range(C):
            dot += g[r, j] * y[r, j]
        for j in range(C):
            g[r, j] = y[r, j] * (g[r, j] - dot)


def softmax_lastaxis_grad(y, g):
    """Input gradient of a last-axis softmax given its output ``y``."""
    y = np.ascontiguousarray(y)
    out = np.array(g, dtype=y.dtype, order="C", copy=True)
    cdef Py_ssize_t last = y.shape[y.ndim - 1]
    if y.dtype == np.float32:
        _softmax_rows_grad[float](y.reshape(-1, last), out.reshape(-1, last))
    elif y.dtype == np.float64:
        _softmax_rows_grad[double](y.reshape(-1, last), out.reshape(-1, last))
    else:
        raise TypeError(f"unsupported dtype {y.dtype}")
    return out
