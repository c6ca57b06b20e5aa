"""Numpy fallback for the 2-D convolution hot kernels.

Cross-correlation over an already zero-padded input. The kernel extents
are tiny (1 or 3), so the loop runs over kernel taps and each tap is a
single large matmul.
"""

import numpy as np

BACKEND_NAME = "numpy"


def conv2d_padded_forward(xp, w, stride, out_h, out_w):
    kh, kw, cin, cout = w.shape
    y = np.zeros((out_h, out_w, cout), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[di : di + out_h * stride : stride, dj : dj + out_w * stride : stride, :]
            y += (patch.reshape(-1, cin) @ w[di, dj]).reshape(out_h, out_w, cout)
    return y


def conv2d_padded_backward(xp, w, stride, grad_y):
    kh, kw, cin, cout = w.shape
    out_h, out_w, _ = grad_y.shape
    g2 = grad_y.reshape(-1, cout)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for di in range(kh):
        for dj in range(kw):
            rows = slice(di, di + out_h * stride, stride)
            cols = slice(dj, dj + out_w * stride, stride)
            patch = xp[rows, cols, :].reshape(-1, cin)
            grad_w[di, dj] = patch.T @ g2
            grad_xp[rows, cols, :] += (g2 @ w[di, dj].T).reshape(out_h, out_w, cin)
    grad_b = g2.sum(axis=0)
    return grad_xp, grad_w, grad_b
