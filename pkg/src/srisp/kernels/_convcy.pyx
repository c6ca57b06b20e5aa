# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled 2-D convolution hot kernels (cross-correlation, padded input)."""

import numpy as np

cimport numpy as cnp

BACKEND_NAME = "cython"


def conv2d_padded_forward(cnp.float32_t[:, :, ::1] xp,
                          cnp.float32_t[:, :, :, ::1] w,
                          int stride, int out_h, int out_w):
    cdef int kh = w.shape[0]
    cdef int kw = w.shape[1]
    cdef int cin = w.shape[2]
    cdef int cout = w.shape[3]
    out = np.zeros((out_h, out_w, cout), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] y = out
    cdef int i, j, di, dj, ci, co
    cdef cnp.float32_t v
    for i in range(out_h):
        for j in range(out_w):
            for di in range(kh):
                for dj in range(kw):
                    for ci in range(cin):
                        v = xp[i * stride + di, j * stride + dj, ci]
                        if v == 0.0:
                            continue
                        for co in range(cout):
                            y[i, j, co] += v * w[di, dj, ci, co]
    return out


def conv2d_padded_backward(cnp.float32_t[:, :, ::1] xp,
                           cnp.float32_t[:, :, :, ::1] w,
                           int stride,
                           cnp.float32_t[:, :, ::1] grad_y):
    cdef int kh = w.shape[0]
    cdef int kw = w.shape[1]
    cdef int cin = w.shape[2]
    cdef int cout = w.shape[3]
    cdef int out_h = grad_y.shape[0]
    cdef int out_w = grad_y.shape[1]
    gx_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2]), dtype=np.float32)
    gw_arr = np.zeros((kh, kw, cin, cout), dtype=np.float32)
    gb_arr = np.zeros(cout, dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] gx = gx_arr
    cdef cnp.float32_t[:, :, :, ::1] gw = gw_arr
    cdef cnp.float32_t[::1] gb = gb_arr
    cdef int i, j, di, dj, ci, co
    cdef cnp.float32_t g, v, acc
    for i in range(out_h):
        for j in range(out_w):
            for co in range(cout):
                gb[co] += grad_y[i, j, co]
            for di in range(kh):
                for dj in range(kw):
                    for ci in range(cin):
                        v = xp[i * stride + di, j * stride + dj, ci]
                        acc = 0.0
                        for co in range(cout):
                            g = grad_y[i, j, co]
                            gw[di, dj, ci, co] += v * g
                            acc += g * w[di, dj, ci, co]
                        gx[i * stride + di, j * stride + dj, ci] += acc
    return gx_arr, gw_arr, gb_arr
