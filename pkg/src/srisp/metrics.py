"""Paired and unpaired image quality metrics.

Paired evaluation uses PSNR and mean angular error; unpaired evaluation
compares Lab histograms via histogram intersection. All statistics are
computed in float64 regardless of input dtype.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
HIST_BINS = 512
HIST_RANGE = (-150.0, 150.0)

# D65 reference white
_D65 = (0.95047, 1.0, 1.08883)


def psnr(reference, candidate):
    """Peak signal-to-noise ratio for [0,1] images, capped at 99 dB."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def angular_error(reference, candidate):
    """Mean per-pixel angle in degrees between color vectors.

    Pixels where either vector has zero norm are excluded; if every
    pixel is excluded this raises ValueError.
    """
    a = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(candidate, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    valid = (na > 0.0) & (nb > 0.0)
    if not np.any(valid):
        raise ValueError("no pixels with nonzero norm")
    ua = a[valid] / na[valid, None]
    ub = b[valid] / nb[valid, None]
    # chord-based angle: exact 0 for identical vectors and better
    # conditioned than arccos of the dot product at small angles
    chord = np.linalg.norm(ua - ub, axis=1)
    angles = np.degrees(2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0)))
    return float(np.mean(angles))


def _lab_f(t):
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3.0 * delta**2) + 4.0 / 29.0)


def raw_to_lab(raw, ccm):
    """Convert a normalized linear RAW image to CIE Lab.

    The camera color matrix maps RAW directly to CIE XYZ (applied as a
    row vector product per pixel); Lab follows the standard transform
    with a D65 reference white.
    """
    v = np.asarray(raw, dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ValueError("expected an (H,W,3) image")
    m = np.asarray(ccm, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(m)) <= 1e-12:
        raise ValueError("singular color matrix")
    xyz = v.reshape(-1, 3) @ m
    fx = _lab_f(xyz[:, 0] / _D65[0])
    fy = _lab_f(xyz[:, 1] / _D65[1])
    fz = _lab_f(xyz[:, 2] / _D65[2])
    lab = np.stack(
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=1
    )
    return lab.reshape(v.shape)


@dataclass
class HistogramSet:
    """Per-channel histograms over a fixed range, kept as raw counts."""

    counts: np.ndarray  # (3, bins)
    n_pixels: int
    bins: int = HIST_BINS
    value_range: tuple = HIST_RANGE

    @staticmethod
    def from_lab(lab, bins=HIST_BINS, value_range=HIST_RANGE):
        v = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
        counts = np.stack(
            [
                np.histogram(v[:, c], bins=bins, range=value_range)[0]
                for c in range(3)
            ]
        ).astype(np.float64)
        return HistogramSet(
            counts=counts, n_pixels=v.shape[0], bins=bins, value_range=value_range
        )

    def densities(self):
        # Normalize per channel by the in-range count so each channel's
        # density sums to 1 even when some values fall outside the range.
        totals = self.counts.sum(axis=1, keepdims=True)
        safe = np.where(totals > 0, totals, 1.0)
        return self.counts / safe


def histogram_intersection(ref: HistogramSet, gen: HistogramSet):
    """Mean per-channel intersection of density-normalized histograms.

    Density normalization makes the score meaningful when the two
    images have different pixel counts.
    """
    if ref.bins != gen.bins or ref.value_range != gen.value_range:
        raise ValueError("histogram binning mismatch")
    da = ref.densities()
    db = gen.densities()
    return float(np.mean(np.sum(np.minimum(da, db), axis=1)))


def split_protocol(image):
    """Split one image into a reference half and two evaluation units.

    The image is rotated so its long side is the width; the left half
    is the reference, the right half is cut along the height into two
    evaluation crops.
    """
    v = np.asarray(image)
    if v.ndim != 3:
        raise ValueError("expected an (H,W,C) image")
    if v.shape[0] > v.shape[1]:
        v = np.rot90(v, k=1)
    h, w = v.shape[:2]
    if w < 4:
        raise ValueError("image too narrow to split")
    half = w // 2
    ref = v[:, :half]
    right = v[:, half:]
    return ref, right[: h // 2], right[h // 2 :]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts with name + metric values

    def add(self, name, **values):
        self.rows.append({"name": name, **values})

    def summary(self):
        keys = sorted({k for r in self.rows for k in r if k != "name"})
        return {
            k: float(np.mean([r[k] for r in self.rows if k in r])) for k in keys
        }

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump({"rows": self.rows, "summary": self.summary()}, f, indent=2)

    def save_csv(self, path):
        keys = ["name"] + sorted({k for r in self.rows for k in r if k != "name"})
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)
