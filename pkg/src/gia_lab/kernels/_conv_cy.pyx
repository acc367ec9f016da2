# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernel triad (direct loops, float64, NCHW)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((b, cout, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, c, i, j, ki, kj, ii, jj
    cdef double acc
    with nogil:
        for n in range(b):
            for o in range(cout):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for c in range(cin):
                            for ki in range(kh):
                                ii = i * stride + ki - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for kj in range(kw):
                                    jj = j * stride + kj - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    acc += x[n, c, ii, jj] * w[o, c, ki, kj]
                        out[n, o, i, j] = acc
    return out_arr


def conv2d_weight_grad(double[:, :, :, ::1] x, double[:, :, :, ::1] dy,
                       tuple w_shape, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    dw_arr = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t n, o, c, i, j, ki, kj, ii, jj
    cdef double g
    with nogil:
        for n in range(b):
            for o in range(cout):
                for i in range(ho):
                    for j in range(wo):
                        g = dy[n, o, i, j]
                        if g == 0.0:
                            continue
                        for c in range(cin):
                            for ki in range(kh):
                                ii = i * stride + ki - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for kj in range(kw):
                                    jj = j * stride + kj - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    dw[o, c, ki, kj] += g * x[n, c, ii, jj]
    return dw_arr


def conv2d_input_grad(double[:, :, :, ::1] dy, double[:, :, :, ::1] w,
                      tuple x_shape, int stride, int pad):
    cdef Py_ssize_t b = x_shape[0], cin = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    dx_arr = np.zeros((b, cin, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, o, c, i, j, ki, kj, ii, jj
    cdef double g
    with nogil:
        for n in range(b):
            for o in range(cout):
                for i in range(ho):
                    for j in range(wo):
                        g = dy[n, o, i, j]
                        if g == 0.0:
                            continue
                        for c in range(cin):
                            for ki in range(kh):
                                ii = i * stride + ki - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for kj in range(kw):
                                    jj = j * stride + kj - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    dx[n, c, ii, jj] += g * w[o, c, ki, kj]
    return dx_arr
