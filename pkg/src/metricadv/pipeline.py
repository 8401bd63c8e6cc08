"""Crop, resize and re-apply perturbation masks to full photos."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import amplify
from .diffnet import ArgumentError, ShapeError
from .images import load_image

MIN_BOX = 8


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    w: int
    h: int

    def check(self, shape: tuple) -> None:
        H, W = shape[:2]
        if self.w < MIN_BOX or self.h < MIN_BOX:
            raise BoxError(f"box {self} smaller than {MIN_BOX}x{MIN_BOX}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > W or self.y0 + self.h > H:
            raise BoxError(f"box {self} outside image of size {W}x{H}")

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(int(d["x0"]), int(d["y0"]), int(d["w"]), int(d["h"]))

    @classmethod
    def load(cls, path: str | Path) -> "BoundingBox":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Photo:
    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < MIN_BOX or p.shape[1] < MIN_BOX:
            raise ShapeError(f"photo must be (H>=8, W>=8, 3), got {p.shape}")

    @classmethod
    def load(cls, path: str | Path) -> "Photo":
        return cls(load_image(path), str(path))


def crop(photo: Photo | np.ndarray, box: BoundingBox) -> np.ndarray:
    pixels = photo.pixels if isinstance(photo, Photo) else np.asarray(photo)
    box.check(pixels.shape)
    rows, cols = box.slices
    return pixels[rows, cols].copy()


def _axis_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling with half-pixel centres; works on signed fields."""
    if out_h < 1 or out_w < 1:
        raise ArgumentError("output dimensions must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _axis_taps(h, out_h)
    c0, c1, fc = _axis_taps(w, out_w)
    extra = (None,) * (img.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    rows = img[r0] * (1.0 - fr) + img[r1] * fr
    fc = fc[(None, slice(None)) + extra]
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def extract_mask(adv_face: np.ndarray, face: np.ndarray) -> np.ndarray:
    adv_face, face = np.asarray(adv_face), np.asarray(face)
    if adv_face.shape != face.shape:
        raise ShapeError(f"shape mismatch {adv_face.shape} vs {face.shape}")
    return adv_face - face


def apply_cropped(face: np.ndarray, delta: np.ndarray, alpha: float) -> np.ndarray:
    return amplify(face, delta, alpha)


def apply_uncropped(photo: Photo, box: BoundingBox, delta: np.ndarray, alpha: float,
                    info: dict | None = None) -> Photo:
    """Resize ``delta`` to the box, amplify, add to the face region, clip.

    Pixels outside the box are copied untouched. If ``info`` is given, the
    fraction of region pixels that hit the clip bounds is stored under
    ``"clipped_fraction"``.
    """
    box.check(photo.pixels.shape)
    if alpha < 1:
        raise ArgumentError("alpha must be >= 1")
    mask = resize_bilinear(delta, box.h, box.w)
    out = photo.pixels.copy()
    rows, cols = box.slices
    raw = out[rows, cols] + alpha * mask
    if info is not None:
        info["clipped_fraction"] = float(np.mean((raw < 0.0) | (raw > 1.0)))
    out[rows, cols] = np.clip(raw, 0.0, 1.0)
    return Photo(out, photo.source)
