# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled data-movement kernels for the conv / pool / upsample layers.

Every routine mirrors the pure-numpy version in ``vluu.kernels`` and
accumulates in the same order, so both backends give bit-identical results.
Arrays are NHWC and C-contiguous.
"""
import numpy as np
cimport numpy as cnp
cimport cython

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x, int stride):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H - 1) // stride + 1
    cdef Py_ssize_t Wo = (W - 1) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, Ho, Wo, 3, 3, C), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t n, i, j, ki, kj, c, si, sj
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    for ki in range(3):
                        si = i * stride + ki - 1
                        if si < 0 or si >= H:
                            continue
                        for kj in range(3):
                            sj = j * stride + kj - 1
                            if sj < 0 or sj >= W:
                                continue
                            for c in range(C):
                                cols[n, i, j, ki, kj, c] = x[n, si, sj, c]
    return out


def col2im3x3(real[:, :, :, :, :, ::1] cols, Py_ssize_t H, Py_ssize_t W, int stride):
    cdef Py_ssize_t N = cols.shape[0], Ho = cols.shape[1], Wo = cols.shape[2]
    cdef Py_ssize_t C = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, i, j, ki, kj, c, si, sj
    # ki/kj outermost so each output element accumulates in (ki, kj) order,
    # matching the slice-add loop of the numpy backend
    with nogil:
        for n in range(N):
            for ki in range(3):
                for kj in range(3):
                    for i in range(Ho):
                        si = i * stride + ki - 1
                        if si < 0 or si >= H:
                            continue
                        for j in range(Wo):
                            sj = j * stride + kj - 1
                            if sj < 0 or sj >= W:
                                continue
                            for c in range(C):
                                dx[n, si, sj, c] = dx[n, si, sj, c] + cols[n, i, j, ki, kj, c]
    return out


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1] // 2, W = x.shape[2] // 2
    cdef Py_ssize_t C = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, H, W, C), dtype=dtype)
    arg = np.empty((N, H, W, C), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = out
    cdef cnp.uint8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, i, j, c
    cdef real best, v
    cdef cnp.uint8_t idx
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        best = x[n, 2 * i, 2 * j, c]
                        idx = 0
                        v = x[n, 2 * i, 2 * j + 1, c]
                        if v > best:
                            best = v
                            idx = 1
                        v = x[n, 2 * i + 1, 2 * j, c]
                        if v > best:
                            best = v
                            idx = 2
                        v = x[n, 2 * i + 1, 2 * j + 1, c]
                        if v > best:
                            best = v
                            idx = 3
                        y[n, i, j, c] = best
                        a[n, i, j, c] = idx
    return out, arg


def maxpool2_backward(real[:, :, :, ::1] dy, cnp.uint8_t[:, :, :, ::1] arg):
    cdef Py_ssize_t N = dy.shape[0], H = dy.shape[1], W = dy.shape[2], C = dy.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, 2 * H, 2 * W, C), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, i, j, c
    cdef cnp.uint8_t idx
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        idx = arg[n, i, j, c]
                        dx[n, 2 * i + (idx >> 1), 2 * j + (idx & 1), c] = dy[n, i, j, c]
    return out


def upsample2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, 2 * H, 2 * W, C), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    cdef Py_ssize_t n, i, j, c
    cdef real v
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        v = x[n, i, j, c]
                        y[n, 2 * i, 2 * j, c] = v
                        y[n, 2 * i, 2 * j + 1, c] = v
                        y[n, 2 * i + 1, 2 * j, c] = v
                        y[n, 2 * i + 1, 2 * j + 1, c] = v
    return out


def upsample2_backward(real[:, :, :, ::1] dy):
    cdef Py_ssize_t N = dy.shape[0], H = dy.shape[1] // 2, W = dy.shape[2] // 2
    cdef Py_ssize_t C = dy.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, i, j, c
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        dx[n, i, j, c] = ((dy[n, 2 * i, 2 * j, c] + dy[n, 2 * i, 2 * j + 1, c])
                                          + dy[n, 2 * i + 1, 2 * j, c]) + dy[n, 2 * i + 1, 2 * j + 1, c]
    return out
