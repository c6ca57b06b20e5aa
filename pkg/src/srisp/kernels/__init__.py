"""Convolution hot kernels with backend selection at import time.

The compiled Cython extension is preferred when available; a numpy
implementation is the fallback. In auto mode, channel-heavy layers are
routed to the numpy path, whose BLAS matmul wins there (see
benchmarks/bench_conv.py). Set SRISP_KERNEL_BACKEND=numpy|cython to
force a backend (forcing an unavailable one raises ImportError).
"""

import os

import numpy as np

from . import conv_np

_requested = os.environ.get("SRISP_KERNEL_BACKEND", "auto").lower()

if _requested in ("auto", "cython"):
    try:
        from . import _convcy as _backend
    except ImportError:
        if _requested == "cython":
            raise
        _backend = conv_np
elif _requested == "numpy":
    _backend = conv_np
else:
    raise ValueError(f"unknown SRISP_KERNEL_BACKEND: {_requested!r}")

BACKEND_NAME = _backend.BACKEND_NAME


def get_backend(name=None):
    """Return a kernel backend module by name (default: the active one)."""
    if name is None:
        return _backend
    if name == "numpy":
        return conv_np
    if name == "cython":
        from . import _convcy

        return _convcy
    raise ValueError(f"unknown backend: {name!r}")


# Channel product (Cin*Cout) above which the BLAS-backed numpy path beats
# the compiled scalar kernel (see benchmarks/bench_conv.py).
_COMPILED_CHANNEL_LIMIT = 128


def _select(x, w, backend):
    # the compiled kernel is float32-only; other dtypes take the numpy path
    if backend is not None:
        return get_backend(backend)
    if x.dtype != np.float32:
        return conv_np
    if _backend is not conv_np and w.shape[2] * w.shape[3] > _COMPILED_CHANNEL_LIMIT:
        return conv_np
    return _backend


def same_padding(extent, k, stride):
    """Zero-pad amounts (lo, hi) so the output extent is ceil(extent/stride)."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    lo = total // 2
    return out, lo, total - lo


def pad_input(x, k, stride):
    h, w, _ = x.shape
    out_h, top, bottom = same_padding(h, k, stride)
    out_w, left, right = same_padding(w, k, stride)
    xp = np.pad(x, ((top, bottom), (left, right), (0, 0)))
    return xp, out_h, out_w, (top, bottom, left, right)


def conv2d_forward(x, w, bias, stride, backend=None):
    """Cross-correlate x (H,W,Cin) with w (k,k,Cin,Cout), zero 'same' padding."""
    b = _select(x, w, backend)
    xp, out_h, out_w, _ = pad_input(x, w.shape[0], stride)
    y = b.conv2d_padded_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, out_h, out_w)
    return np.asarray(y) + bias


def conv2d_backward(x, w, stride, grad_y, backend=None):
    """Gradients of conv2d_forward w.r.t. (x, w, bias)."""
    b = _select(x, w, backend)
    k = w.shape[0]
    xp, _, _, (top, bottom, left, right) = pad_input(x, k, stride)
    gx, gw, gb = b.conv2d_padded_backward(
        np.ascontiguousarray(xp),
        np.ascontiguousarray(w),
        stride,
        np.ascontiguousarray(grad_y),
    )
    gx = np.asarray(gx)
    h, wid, _ = x.shape
    gx = gx[top : top + h, left : left + wid, :]
    return gx, np.asarray(gw), np.asarray(gb)
