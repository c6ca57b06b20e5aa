"""Image, sidecar, and manifest I/O.

RAW images travel as 16-bit PNGs (single-channel Bayer or 3-channel
linear) with a JSON sidecar carrying black/white levels and the camera
color matrix. RGB inputs are ordinary 8-bit PNG/JPEG files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import cv2
import numpy as np

from .blocks import demosaic_bilinear

SIDECAR_SCHEMA = 1
MANIFEST_SCHEMA = 1


@dataclass
class RawSidecar:
    black_level: int
    white_level: int
    ccm: np.ndarray  # 3x3
    camera_id: str = ""
    bayer_pattern: str | None = None

    def __post_init__(self):
        if self.white_level <= self.black_level:
            raise ValueError("white level must exceed black level")
        self.ccm = np.asarray(self.ccm, dtype=np.float32).reshape(3, 3)
        if abs(np.linalg.det(self.ccm.astype(np.float64))) <= 1e-8:
            raise ValueError("sidecar CCM is singular")

    def to_dict(self):
        d = {
            "schema": SIDECAR_SCHEMA,
            "black_level": int(self.black_level),
            "white_level": int(self.white_level),
            "ccm": [float(v) for v in self.ccm.reshape(-1)],
            "camera_id": self.camera_id,
        }
        if self.bayer_pattern:
            d["bayer_pattern"] = self.bayer_pattern
        return d

    @staticmethod
    def from_dict(d):
        return RawSidecar(
            black_level=d["black_level"],
            white_level=d["white_level"],
            ccm=np.asarray(d["ccm"], dtype=np.float32).reshape(3, 3),
            camera_id=d.get("camera_id", ""),
            bayer_pattern=d.get("bayer_pattern"),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @staticmethod
    def load(path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing sidecar {path}")
        with open(path) as f:
            return RawSidecar.from_dict(json.load(f))


def normalize_raw(values, sidecar: RawSidecar):
    """Map integer DNs to [0,1] via black/white levels, clamped."""
    v = np.asarray(values, dtype=np.float32)
    span = np.float32(sidecar.white_level - sidecar.black_level)
    return np.clip((v - np.float32(sidecar.black_level)) / span, 0.0, 1.0)


def load_raw(path, sidecar: RawSidecar):
    """Load a 16-bit RAW PNG as a normalized (H,W,3) image.

    Single-channel files are treated as Bayer mosaics and demosaiced
    using the sidecar's pattern (default RGGB).
    """
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IOError(f"cannot read {path}")
    if img.dtype != np.uint16:
        raise ValueError(f"{path}: RAW container must be 16-bit, got {img.dtype}")
    norm = normalize_raw(img, sidecar)
    if norm.ndim == 2:
        return demosaic_bilinear(norm, sidecar.bayer_pattern or "RGGB")
    if norm.shape[2] == 3:
        return np.ascontiguousarray(norm[:, :, ::-1])  # BGR -> RGB
    raise ValueError(f"{path}: expected 1 or 3 channels")


def save_raw(image, sidecar: RawSidecar, path):
    """Quantize a [0,1] image back to DNs and write a 16-bit PNG."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    span = sidecar.white_level - sidecar.black_level
    dn = np.round(v * span + sidecar.black_level).astype(np.uint16)
    if dn.ndim == 3:
        dn = np.ascontiguousarray(dn[:, :, ::-1])  # RGB -> BGR
    if not cv2.imwrite(str(path), dn):
        raise IOError(f"cannot write {path}")


def load_rgb(path):
    """Load an 8-bit RGB image as float32 in [0,1]."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise IOError(f"cannot read {path}")
    return np.ascontiguousarray(img[:, :, ::-1]).astype(np.float32) / 255.0


def save_rgb(image, path):
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    dn = np.round(v * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), np.ascontiguousarray(dn[:, :, ::-1])):
        raise IOError(f"cannot write {path}")


@dataclass
class ManifestEntry:
    rgb_path: str | None = None
    raw_path: str | None = None
    meta_path: str | None = None
    camera_id: str = ""

    def load_raw_image(self):
        return load_raw(self.raw_path, self.sidecar())

    def sidecar(self):
        return RawSidecar.load(self.meta_path)


@dataclass
class Manifest:
    entries: list

    @staticmethod
    def load(path):
        with open(path) as f:
            doc = json.load(f)
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema {doc.get('schema')!r}")
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            if p is None:
                return None
            return p if os.path.isabs(p) else os.path.join(base, p)

        entries = []
        for e in doc["entries"]:
            entry = ManifestEntry(
                rgb_path=resolve(e.get("rgb_path")),
                raw_path=resolve(e.get("raw_path")),
                meta_path=resolve(e.get("meta_path")),
                camera_id=e.get("camera_id", ""),
            )
            if entry.raw_path and not entry.meta_path:
                raise ValueError(f"entry {e} has raw_path without meta_path")
            for p in (entry.rgb_path, entry.raw_path, entry.meta_path):
                if p and not os.path.exists(p):
                    raise FileNotFoundError(p)
            entries.append(entry)
        if not entries:
            raise ValueError("empty manifest")
        return Manifest(entries=entries)

    @staticmethod
    def save(path, entries):
        doc = {
            "schema": MANIFEST_SCHEMA,
            "entries": [
                {
                    k: v
                    for k, v in (
                        ("rgb_path", e.rgb_path),
                        ("raw_path", e.raw_path),
                        ("meta_path", e.meta_path),
                        ("camera_id", e.camera_id),
                    )
                    if v
                }
                for e in entries
            ],
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
