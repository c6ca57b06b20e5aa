"""Minimal reverse-mode differentiation engine.

Tensors wrap float32 numpy arrays. Operations compute eagerly; when a
Tape is active and an input requires gradients, a backward closure is
recorded. Tapes are created per forward pass and discarded after
``gradients`` runs, so no state leaks across steps. Tensors are treated
as immutable once created; a tape must not be shared across threads.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []
_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Temporarily switch the engine's arithmetic dtype.

    Training and inference run in float32. Finite-difference gradient
    verification runs under ``precision(np.float64)`` so that rounding
    noise does not swamp the comparison.
    """

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype).type

    def __enter__(self):
        global _DEFAULT_DTYPE
        self._saved = _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._dtype
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._saved
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations in execution (topological) order."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def gradients(self, loss, wrt=None):
        """Backpropagate from a scalar loss recorded on this tape.

        Returns a dict mapping Tensor -> float32 gradient array. With
        ``wrt`` given, every listed tensor gets an entry (zeros if the
        loss does not depend on it); otherwise all reached leaves that
        require gradients are returned.
        """
        if loss.size != 1:
            raise GraphError("loss must be a scalar")
        if loss.tape_id != id(self):
            raise GraphError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        produced = {id(node_out) for node_out, _, _ in self._nodes}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gt in zip(inputs, backward(g)):
                if gt is None or not (t.requires_grad or id(t) in produced):
                    continue
                gt = np.asarray(gt)
                key = id(t)
                holders[key] = t
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
        if wrt is not None:
            return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}
        out_map = {}
        for key, t in holders.items():
            if t.requires_grad and id(t) not in produced:
                out_map[t] = grads[key]
        return out_map


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss, wrt=None):
    """Convenience: run gradients on the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise GraphError("no active tape")
    return tape.gradients(loss, wrt=wrt)


def _record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is None:
        return out
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    if not any(t.requires_grad for t in tensors):
        return out
    out.requires_grad = True
    out.tape_id = id(tape)
    tape._nodes.append((out, tensors, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    if np.any(b.data == 0):
        raise ValueError("division by zero")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def pow_(base, exponent):
    """base ** exponent for base >= 0; exponent may be a scalar Tensor."""
    base = as_tensor(base)
    if np.any(base.data < 0):
        raise ValueError("pow requires non-negative base")
    exponent = as_tensor(exponent)
    _check_broadcast(base, exponent)
    out = Tensor(np.power(base.data, exponent.data))

    def bwd(g):
        gb = _unbroadcast(g * exponent.data * np.power(base.data, exponent.data - 1.0), base.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            logb = np.log(np.maximum(base.data, base.data.dtype.type(1e-30)))
        ge = _unbroadcast(g * out.data * logb, exponent.shape)
        return gb, ge

    return _record(out, (base, exponent), bwd)


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(np.maximum(a.data, b.data))

    def bwd(g):
        take_a = a.data >= b.data
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def absolute(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))

    def bwd(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), bwd)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; subgradient is 0 at the boundary, 1 strictly inside."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def bwd(g):
        inside = (a.data > lo) & (a.data < hi)
        return (np.where(inside, g, 0.0),)

    return _record(out, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd(g):
        return (g * out.data,)

    return _record(out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires positive input")
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        return (np.where(a.data > 0, g, 0.0),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions / reshaping


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _record(out, (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size // max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype) / a.data.dtype.type(n),)

    return _record(out, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bwd)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g, splits, axis=axis)

    return _record(out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bwd)


def affine(v, w, b):
    """v (n,) @ w (n,m) + b (m,)."""
    v, w, b = as_tensor(v), as_tensor(w), as_tensor(b)
    if v.ndim != 1 or w.ndim != 2 or v.shape[0] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shape mismatch: {v.shape}, {w.shape}, {b.shape}")
    out = Tensor(v.data @ w.data + b.data)

    def bwd(g):
        return g @ w.data.T, np.outer(v.data, g), g

    return _record(out, (v, w, b), bwd)


def inv3(m):
    """Inverse of a 3x3 matrix; raises on |det| <= 1e-8."""
    m = as_tensor(m)
    if m.shape != (3, 3):
        raise ShapeError("inv3 expects a 3x3 matrix")
    det = float(np.linalg.det(m.data.astype(np.float64)))
    if abs(det) <= 1e-8:
        raise ValueError(f"singular matrix (|det|={abs(det):.3e})")
    inv = np.linalg.inv(m.data.astype(np.float64)).astype(m.data.dtype)
    out = Tensor(inv)

    def bwd(g):
        # d(A^-1) = -A^-1 dA A^-1  =>  grad_A = -A^-T g A^-T
        return (-(inv.T @ g @ inv.T),)

    return _record(out, (m,), bwd)


def softmax(v):
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError("softmax expects a 1-D tensor")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("softmax input must be finite")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    y = e / e.sum()
    out = Tensor(y)

    def bwd(g):
        return (y * (g - float(g @ y)),)

    return _record(out, (v,), bwd)


def dict_mix(candidates, weights):
    """Weighted sum over the leading axis: sum_k w[k] * candidates[k]."""
    candidates, weights = as_tensor(candidates), as_tensor(weights)
    if weights.ndim != 1 or candidates.shape[0] != weights.shape[0]:
        raise ShapeError("dict_mix: leading extent must match weight length")
    out = Tensor(np.tensordot(weights.data, candidates.data, axes=([0], [0])))

    def bwd(g):
        k = weights.shape[0]
        gc = weights.data.reshape((k,) + (1,) * g.ndim) * g[None, ...]
        gw = np.tensordot(candidates.data, g, axes=(tuple(range(1, candidates.ndim)), tuple(range(g.ndim))))
        return gc, gw

    return _record(out, (candidates, weights), bwd)


def take(a, k):
    """a[k] along the leading axis, with scatter gradient."""
    a = as_tensor(a)
    out = Tensor(a.data[k])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[k] = g
        return (ga,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# image ops


def conv2d(x, kernel, bias, stride=1):
    """Cross-correlation with 'same' zero padding; out extent ceil(in/stride)."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d expects x (H,W,Cin) and kernel (k,k,Cin,Cout)")
    k = kernel.shape[0]
    if k not in (1, 3) or kernel.shape[1] != k:
        raise ShapeError(f"unsupported kernel extent {kernel.shape[:2]}")
    if stride not in (1, 2):
        raise ShapeError(f"unsupported stride {stride}")
    if x.shape[2] != kernel.shape[2]:
        raise ShapeError(f"channel mismatch: input {x.shape[2]} vs kernel {kernel.shape[2]}")
    if bias.shape != (kernel.shape[3],):
        raise ShapeError("bias length must equal output channels")
    out = Tensor(kernels.conv2d_forward(x.data, kernel.data, bias.data, stride))

    def bwd(g):
        gx, gw, gb = kernels.conv2d_backward(x.data, kernel.data, stride, g)
        return gx, gw, gb

    return _record(out, (x, kernel, bias), bwd)


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("global_avg_pool expects (H,W,C)")
    out = Tensor(x.data.mean(axis=(0, 1)))
    n = x.shape[0] * x.shape[1]

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype) / x.data.dtype.type(n),)

    return _record(out, (x,), bwd)


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize (align_corners=false). Preprocessing only: returns a
    leaf array, gradients are not tracked through it."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] < 2 or data.shape[1] < 2:
        raise ShapeError("resize_bilinear expects (H,W,C) with H,W >= 2")
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    h, w, _ = data.shape

    def _axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    r0, r1, fr = _axis(h, out_h)
    c0, c1, fc = _axis(w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = data[r0][:, c0] * (1 - fc) + data[r0][:, c1] * fc
    bot = data[r1][:, c0] * (1 - fc) + data[r1][:, c1] * fc
    return np.asarray(top * (1 - fr) + bot * fr, dtype=np.float32)
