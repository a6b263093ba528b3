"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError


def check_image(image, shape, name="image") -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape == tuple(shape[1:]) and shape[0] == 1:
        arr = arr[None]
    if arr.shape != tuple(shape):
        raise ValidationError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite pixels")
    if arr.min() < -1 - 1e-6 or arr.max() > 1 + 1e-6:
        raise ValidationError(f"{name} must be scaled to [-1, 1]")
    return arr


def check_image_pair(X, shape):
    if len(X) != 2:
        raise ValidationError(f"expected exactly two endpoint images, got {len(X)}")
    return check_image(X[0], shape, "first image"), check_image(X[1], shape, "second image")


def check_alphas(alphas) -> np.ndarray:
    a = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    if a.ndim != 1:
        raise ValidationError("alphas must be a 1-D sequence")
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
        raise ValidationError("alphas must lie in [0, 1]")
    return a


def check_file(path, what="file") -> Path:
    p = Path(path)
    if not str(path) or not p.is_file():
        raise ValidationError(f"{what} not found: {path}", [f"{what} not found: {path}"])
    return p


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` in [-1, 1] to ``(H, W)`` or ``(H, W, C)`` bytes."""
    arr = np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)


def read_image(path, shape) -> np.ndarray:
    """Load an image file as ``shape`` = ``(C, H, W)`` in [-1, 1].

    Non-matching sizes are center-cropped to the target aspect ratio, then resized.
    """
    from PIL import Image

    p = check_file(path, "image")
    try:
        img = Image.open(p)
        img.load()
    except OSError as exc:
        raise ValidationError(f"cannot read image {p}: {exc}") from exc
    c, h, w = shape
    img = img.convert("L" if c == 1 else "RGB")
    if img.size != (w, h):
        src_w, src_h = img.size
        scale = min(src_w / w, src_h / h)
        cw, ch = round(w * scale), round(h * scale)
        left, top = (src_w - cw) // 2, (src_h - ch) // 2
        img = img.crop((left, top, left + cw, top + ch)).resize((w, h), Image.Resampling.LANCZOS)
    return from_uint8(np.asarray(img))


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG")
