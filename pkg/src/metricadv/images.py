"""Image files: 8-bit PNG/PPM via Pillow, float32 ``.npy`` sidecars."""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr[..., :3].astype(np.float64) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    """Read PNG or binary PPM as float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write with 8-bit quantization; format follows the suffix (.png, .ppm)."""
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format=fmt)


def save_float(img: np.ndarray, path: str | Path) -> None:
    np.save(Path(path), np.asarray(img, dtype=np.float32), allow_pickle=False)


def load_float(path: str | Path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False).astype(np.float64)


def encode_png_b64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(text: str) -> np.ndarray:
    """Inverse of :func:`encode_png_b64`; raises ValueError on bad payloads."""
    try:
        raw = base64.b64decode(text, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except Exception as exc:  # binascii.Error, PIL.UnidentifiedImageError, ...
        raise ValueError(f"cannot decode image payload: {exc}") from exc
