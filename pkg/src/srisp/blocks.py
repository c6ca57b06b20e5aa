"""Differentiable ISP blocks and their inverses.

Five blocks: global gain, white balance, color correction, gamma
correction, and a residual tone-mapping CNN. The reverse composition
(RGB -> RAW-like) applies tone mapping first, then gamma, color, white
balance, and global gain inverses; the forward composition runs the
other way and clamps to [0,1] at the RGB end only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

GC_FLOOR = 1e-8

# Inverse gains are blended toward 1 for pixels whose channel-mean
# luminance exceeds this knee, so near-saturated highlights are not
# un-clipped to implausible values.
HIGHLIGHT_KNEE = 0.9


def _check_positive(value, name):
    if np.any(np.asarray(value if not isinstance(value, Tensor) else value.data) <= 0):
        raise ValueError(f"{name} must be positive")


def _highlight_mask(x):
    """Smooth 0..1 mask over near-saturated pixels: ((mean_c - knee)+ / (1-knee))^2."""
    m = ad.mean_(x, axis=2, keepdims=True)
    t = ad.maximum(m - HIGHLIGHT_KNEE, 0.0) / (1.0 - HIGHLIGHT_KNEE)
    return t * t


def _safe_inverse_gain(x, inv_gain):
    """Apply an inverse gain with highlight preservation.

    Below the luminance knee the multiplier is exactly ``inv_gain``; near
    saturation it is blended toward 1 (and never below ``inv_gain``).
    """
    m = _highlight_mask(x)
    mult = ad.maximum(m + (1.0 - m) * inv_gain, inv_gain)
    return x * mult


def gg_apply(x, g, direction, clamp_output=True):
    """Global gain: forward multiplies by the scalar g, reverse divides
    (with highlight preservation)."""
    g = as_tensor(g)
    _check_positive(g, "global gain")
    if direction == "fwd":
        y = as_tensor(x) * g
        return ad.clamp(y, 0.0, 1.0) if clamp_output else y
    if direction == "rev":
        return _safe_inverse_gain(as_tensor(x), 1.0 / g)
    raise ValueError(f"unknown direction {direction!r}")


def wb_apply(x, gains, direction, clamp_output=True):
    """White balance: per-channel gains (r, g, b)."""
    gains = as_tensor(gains)
    if gains.shape != (3,):
        raise ad.ShapeError("white balance expects 3 channel gains")
    _check_positive(gains, "white balance gains")
    if direction == "fwd":
        y = as_tensor(x) * gains
        return ad.clamp(y, 0.0, 1.0) if clamp_output else y
    if direction == "rev":
        return _safe_inverse_gain(as_tensor(x), 1.0 / gains)
    raise ValueError(f"unknown direction {direction!r}")


def column_normalize(m):
    """Divide each column of a matrix by its sum."""
    m = as_tensor(m)
    s = ad.sum_(m, axis=0, keepdims=True)
    return m / s


def cc_apply(x, ccm, direction):
    """Color correction: pixels times a column-normalized 3x3 matrix.

    The normalization is re-applied at every call; the reverse direction
    multiplies by the matrix inverse.
    """
    x = as_tensor(x)
    m = column_normalize(ccm)
    if direction == "rev":
        m = ad.inv3(m)
    elif direction != "fwd":
        raise ValueError(f"unknown direction {direction!r}")
    h, w, c = x.shape
    if c != 3:
        raise ad.ShapeError("color correction expects 3 channels")
    flat = ad.reshape(x, (h * w, 3))
    return ad.reshape(ad.matmul(flat, m), (h, w, 3))


def gc_apply(x, gamma, direction):
    """Gamma: forward max(x, 1e-8)^(1/gamma), reverse max(x, 1e-8)^gamma."""
    gamma = as_tensor(gamma)
    _check_positive(gamma, "gamma")
    base = ad.maximum(as_tensor(x), GC_FLOOR)
    exponent = 1.0 / gamma if direction == "fwd" else gamma
    if direction not in ("fwd", "rev"):
        raise ValueError(f"unknown direction {direction!r}")
    return ad.pow_(base, exponent)


def dtm_apply(x, layers):
    """Residual tone-mapping CNN: x + conv3(relu(conv3(...))), 3->32->32->32->3.

    ``layers`` is a list of (kernel, bias) pairs for the chosen direction;
    the caller picks the forward or reverse parameter set.
    """
    x = as_tensor(x)
    if x.shape[2] != 3:
        raise ad.ShapeError("tone mapping expects 3 channels")
    h = x
    for i, (kernel, bias) in enumerate(layers):
        h = ad.conv2d(h, kernel, bias, stride=1)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return x + h


@dataclass
class PipelineParams:
    """One full set of selected block parameters."""

    gain: Tensor
    wb_gains: Tensor
    ccm: Tensor
    gamma: Tensor
    dtm_rev: list | None = None  # [(kernel, bias)] x 4
    dtm_fwd: list | None = None

    @staticmethod
    def identity(use_dtm=False):
        zero_layers = None
        if use_dtm:
            dims = [(3, 32), (32, 32), (32, 32), (32, 3)]
            zero_layers = [
                (Tensor(np.zeros((3, 3, ci, co))), Tensor(np.zeros(co))) for ci, co in dims
            ]
        return PipelineParams(
            gain=Tensor(1.0),
            wb_gains=Tensor(np.ones(3)),
            ccm=Tensor(np.eye(3)),
            gamma=Tensor(1.0),
            dtm_rev=zero_layers,
            dtm_fwd=zero_layers,
        )


def pipeline_reverse(x_rgb, params: PipelineParams):
    """RGB -> RAW-like: TM^-1, GC^-1, CC^-1, WB^-1, GG^-1 in that order."""
    h = as_tensor(x_rgb)
    if params.dtm_rev is not None:
        h = dtm_apply(h, params.dtm_rev)
    h = gc_apply(h, params.gamma, "rev")
    h = cc_apply(h, params.ccm, "rev")
    h = wb_apply(h, params.wb_gains, "rev")
    h = gg_apply(h, params.gain, "rev")
    return h


def pipeline_forward(y_raw, params: PipelineParams):
    """RAW -> RGB: GG, WB, CC, GC, TM; clamps to [0,1] at the RGB end only."""
    h = as_tensor(y_raw)
    h = gg_apply(h, params.gain, "fwd", clamp_output=False)
    h = wb_apply(h, params.wb_gains, "fwd", clamp_output=False)
    h = cc_apply(h, params.ccm, "fwd")
    h = gc_apply(h, params.gamma, "fwd")
    if params.dtm_fwd is not None:
        h = dtm_apply(h, params.dtm_fwd)
    return ad.clamp(h, 0.0, 1.0)


# ---------------------------------------------------------------------------
# demosaicing (deterministic preprocessing, numpy only)

_PATTERNS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (0, 1), (1, 0), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (0, 0), (1, 1), (0, 1)),
}

# normalized-convolution weights; at interior pixels this reproduces the
# classic bilinear interpolation kernels for every Bayer channel
_DEMOSAIC_WEIGHTS = np.array(
    [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]], dtype=np.float32
)


def demosaic_bilinear(bayer, pattern="RGGB"):
    """Bilinear demosaic of a single-channel Bayer mosaic to (H,W,3)."""
    bayer = np.asarray(bayer, dtype=np.float32)
    if bayer.ndim == 3 and bayer.shape[2] == 1:
        bayer = bayer[:, :, 0]
    if bayer.ndim != 2:
        raise ad.ShapeError("demosaic expects a single-channel mosaic")
    h, w = bayer.shape
    if h % 2 or w % 2:
        raise ValueError("Bayer mosaic extents must be even")
    if pattern not in _PATTERNS:
        raise ValueError(f"unknown Bayer pattern {pattern!r}")
    r_off, g1_off, g2_off, b_off = _PATTERNS[pattern]

    masks = np.zeros((h, w, 3), dtype=np.float32)
    masks[r_off[0] :: 2, r_off[1] :: 2, 0] = 1.0
    masks[g1_off[0] :: 2, g1_off[1] :: 2, 1] = 1.0
    masks[g2_off[0] :: 2, g2_off[1] :: 2, 1] = 1.0
    masks[b_off[0] :: 2, b_off[1] :: 2, 2] = 1.0

    vals = masks * bayer[:, :, None]
    num = _conv3_same(vals, _DEMOSAIC_WEIGHTS)
    den = _conv3_same(masks, _DEMOSAIC_WEIGHTS)
    return (num / den).astype(np.float32)


def _conv3_same(x, weights):
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    h, w, _ = x.shape
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            wt = weights[di, dj]
            if wt:
                out += wt * xp[di : di + h, dj : dj + w, :]
    return out
