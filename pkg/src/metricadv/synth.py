"""Procedural stand-in identities for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet import ArgumentError
from .embedding import LabeledImage


@dataclass(frozen=True)
class SynthSpec:
    identities: int = 10
    per_identity: int = 20
    height: int = 16
    width: int = 16
    shift: int = 1
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.identities < 2:
            raise ArgumentError("need at least two identities")
        if self.per_identity < 1 or self.height < 4 or self.width < 4:
            raise ArgumentError("invalid image count or size")
        if self.shift < 0 or not 0.0 <= self.noise <= 0.05:
            raise ArgumentError("shift must be >= 0 and noise in [0, 0.05]")


def label_name(k: int) -> str:
    return f"id{k:02d}"


def _base_pattern(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.empty((h, w, 3))
    for c in range(3):
        field = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(-2.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        field -= field.min()
        field /= max(field.max(), 1e-9)
        img[..., c] = 0.2 + 0.6 * field
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are exact."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def gen_identities(spec: SynthSpec) -> list[LabeledImage]:
    """``identities * per_identity`` images; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    bases = [_base_pattern(rng, spec.height, spec.width) for _ in range(spec.identities)]
    out = []
    for k, base in enumerate(bases):
        for _ in range(spec.per_identity):
            dy, dx = rng.integers(-spec.shift, spec.shift + 1, size=2)
            img = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
            if spec.noise > 0:
                img = img + rng.normal(0.0, spec.noise, img.shape)
            out.append(LabeledImage(quantize(img), label_name(k)))
    return out


def split(dataset: list[LabeledImage], n_train: int, n_gallery: int):
    """Per label: first ``n_train`` for training, next ``n_gallery`` for the gallery, rest probes."""
    by_label: dict = {}
    for item in dataset:
        by_label.setdefault(item.label, []).append(item)
    train, gallery, probe = [], [], []
    for label in sorted(by_label):
        items = by_label[label]
        train += items[:n_train]
        gallery += items[n_train:n_train + n_gallery]
        probe += items[n_train + n_gallery:]
    return train, gallery, probe


def make_photo(face: np.ndarray, scale: int, pad: tuple[int, int, int, int],
               seed: int = 0) -> tuple[np.ndarray, dict]:
    """Embed an upscaled face into a textured canvas.

    Returns the photo and its bounding box ``{"x0", "y0", "w", "h"}``.
    ``pad`` is (top, bottom, left, right) in pixels.
    """
    rng = np.random.default_rng(seed)
    big = np.repeat(np.repeat(face, scale, axis=0), scale, axis=1)
    top, bottom, left, right = pad
    h, w = big.shape[0] + top + bottom, big.shape[1] + left + right
    canvas = quantize(0.5 + 0.15 * rng.standard_normal((h, w, 3)))
    canvas[top:top + big.shape[0], left:left + big.shape[1]] = big
    return canvas, {"x0": left, "y0": top, "w": big.shape[1], "h": big.shape[0]}
