# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution lane.

Same three contracts as the numpy lane (_convnp), with explicit loops over
typed memoryviews. Padding is handled by bounds tests instead of padded
copies, and the accumulation order is fixed, so results are deterministic.
"""

import numpy as np


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w,
                   int stride, int padding):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t co, ci, oy, ox, ky, kx, iy, ix
    cdef double acc
    with nogil:
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - padding
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[ci, iy, ix] * w[co, ci, ky, kx]
                    y[co, oy, ox] = acc
    return out


def conv2d_grad_input(double[:, :, ::1] gy, double[:, :, :, ::1] w,
                      in_shape, int stride, int padding):
    cdef Py_ssize_t cin = in_shape[0], h = in_shape[1], wd = in_shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gy.shape[1], ow = gy.shape[2]
    out = np.zeros((cin, h, wd))
    cdef double[:, :, ::1] gx = out
    cdef Py_ssize_t co, ci, oy, ox, ky, kx, iy, ix
    cdef double g
    with nogil:
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    g = gy[co, oy, ox]
                    for ci in range(cin):
                        for ky in range(kh):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - padding
                                if ix < 0 or ix >= wd:
                                    continue
                                gx[ci, iy, ix] += g * w[co, ci, ky, kx]
    return out


def conv2d_grad_weight(double[:, :, ::1] gy, double[:, :, ::1] x,
                       w_shape, int stride, int padding):
    cdef Py_ssize_t cout = w_shape[0], cin = w_shape[1]
    cdef Py_ssize_t kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t oh = gy.shape[1], ow = gy.shape[2]
    out = np.zeros((cout, cin, kh, kw))
    cdef double[:, :, :, ::1] gw = out
    cdef Py_ssize_t co, ci, oy, ox, ky, kx, iy, ix
    cdef double g
    with nogil:
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    g = gy[co, oy, ox]
                    for ci in range(cin):
                        for ky in range(kh):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - padding
                                if ix < 0 or ix >= wd:
                                    continue
                                gw[co, ci, ky, kx] += g * x[ci, iy, ix]
    return out
