"""Pseudo-pair generation for self-supervised training.

Two kinds of pairs are produced from unpaired RGB/RAW data:

* randomized-ISP pairs: a RAW image is pushed through a simple forward
  ISP with randomized parameters, giving a (pseudo-RGB, RAW) pair;
* teacher pairs: the EMA teacher's reverse pipeline converts a real RGB
  image into a pseudo-RAW target, which also serves as the student's
  reference image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks, selector
from .autodiff import Tensor
from .model import load_builtin_ccm_pool

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)  # BT.601


@dataclass
class RandIspConfig:
    gain_range: tuple = (1.0, 2.0)
    gamma_range: tuple = (2.2, 3.2)
    luma_trim: float = 0.05
    ccm_pool: list = field(default_factory=load_builtin_ccm_pool)

    def __post_init__(self):
        if self.gain_range[0] <= 0 or self.gamma_range[0] <= 0:
            raise ValueError("parameter ranges must be positive")
        if self.gain_range[1] < self.gain_range[0] or self.gamma_range[1] < self.gamma_range[0]:
            raise ValueError("parameter ranges must be (low, high)")
        if not 0.0 <= self.luma_trim < 0.5:
            raise ValueError("luma trim fraction must be in [0, 0.5)")


def grayworld_gains(y, trim=0.05):
    """Gray-world white-balance gains (G/R, 1, G/B) with luma trimming.

    Pixels whose BT.601 luma falls strictly below the ``trim`` percentile
    or strictly above the (1-trim) percentile are excluded; ties at the
    thresholds survive, so constant images are untrimmed.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[2] != 3:
        raise ValueError("expected an (H,W,3) image")
    luma = y @ LUMA_WEIGHTS
    lo = np.percentile(luma, 100.0 * trim)
    hi = np.percentile(luma, 100.0 * (1.0 - trim))
    keep = (luma >= lo) & (luma <= hi)
    if not np.any(keep):
        raise ValueError("all pixels trimmed")
    means = y[keep].mean(axis=0)
    if means[0] <= 0 or means[1] <= 0 or means[2] <= 0:
        raise ValueError("zero channel mean after trimming")
    gains = np.array([means[1] / means[0], 1.0, means[1] / means[2]], dtype=np.float32)
    return gains


def sample_ccm(pool, rng):
    """Random convex interpolation of two pool matrices, column-normalized."""
    if not pool:
        raise ValueError("empty CCM pool")
    if len(pool) == 1:
        m = np.asarray(pool[0][1], dtype=np.float64)
    else:
        a, b = rng.choice(len(pool), size=2, replace=False)
        t = rng.uniform()
        m = t * np.asarray(pool[a][1], dtype=np.float64) + (1.0 - t) * np.asarray(pool[b][1], dtype=np.float64)
    m = m / m.sum(axis=0, keepdims=True)
    return m.astype(np.float32)


def smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def isp_rand(y, cfg: RandIspConfig, rng):
    """Randomized traditional forward ISP: WB (gray world), global gain,
    CCM, gamma encoding, smoothstep tone curve, clamp.

    A pure function of (y, cfg, rng state); pair it with the untouched y.
    """
    y = np.asarray(y, dtype=np.float32)
    gains = grayworld_gains(y, cfg.luma_trim)
    gain = rng.uniform(*cfg.gain_range)
    ccm = sample_ccm(cfg.ccm_pool, rng)
    gamma = rng.uniform(*cfg.gamma_range)

    x = y * gains[None, None, :]
    x = x * np.float32(gain)
    x = x.reshape(-1, 3) @ ccm
    x = x.reshape(y.shape)
    x = np.power(np.maximum(x, blocks.GC_FLOOR), 1.0 / gamma)
    x = smoothstep(np.clip(x, 0.0, 1.0))
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def make_pp_mt(x, y_ref, teacher, reference_mode="teacher-output"):
    """Teacher-generated training triple for one RGB image.

    Runs the (frozen) teacher's reverse pipeline on ``x`` guided by
    ``y_ref`` and returns (input, reference, target). In the default mode
    the teacher output serves as both reference and regression target;
    the ablation mode "target-raw" keeps ``y_ref`` as the reference.
    """
    sel = selector.select_all(teacher, x, y_ref)
    y_hat = blocks.pipeline_reverse(Tensor(np.asarray(x, dtype=np.float32)), sel.params)
    y_hat = np.clip(y_hat.data, 0.0, 1.0)
    if reference_mode == "teacher-output":
        return x, y_hat, y_hat
    if reference_mode == "target-raw":
        return x, np.asarray(y_ref, dtype=np.float32), y_hat
    raise ValueError(f"unknown reference mode {reference_mode!r}")
