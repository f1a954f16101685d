"""Image arrays and lossless PNG I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and values nominally in ``[0, 1]``. Pipelines work in float64;
clamping happens only when writing to disk.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "ImageError",
    "UnsupportedImageError",
    "as_image",
    "load_image",
    "save_image",
    "quantize",
    "center_crop_resize",
]


class ImageError(Exception):
    """Raised for missing, unreadable or malformed image files."""

    def __init__(self, path, message):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")


class UnsupportedImageError(ImageError):
    """The file is a readable image but not 8-bit grayscale or RGB."""


def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an ``(H, W, C)`` float64 image.

    2-D input is promoted to a single channel.
    """
    img = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be non-empty, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def quantize(img) -> np.ndarray:
    """Bytes written by :func:`save_image`: clamp, scale by 255, round half up."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ImageError(path, "no such file")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedImageError(path, f"unsupported format {im.format!r}, expected PNG")
            if im.mode not in ("L", "RGB"):
                raise UnsupportedImageError(
                    path, f"unsupported mode {im.mode!r}, expected 8-bit grayscale or RGB"
                )
            raw = np.asarray(im, dtype=np.uint8)
    except UnsupportedImageError:
        raise
    except OSError as exc:
        raise ImageError(path, f"cannot decode image ({exc})") from exc
    return as_image(raw.astype(np.float64) / 255.0)


def save_image(img, path) -> None:
    img = as_image(img)
    data = quantize(img)
    if data.shape[2] == 1:
        pil = Image.fromarray(data[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(data, mode="RGB")
    path = Path(path)
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise ImageError(path, f"cannot write image ({exc})") from exc


def center_crop_resize(img, side: int) -> np.ndarray:
    """Crop the largest centered square, then bicubic-resample it to ``side``."""
    from .operators import resample_matrix

    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    img = as_image(img)
    h, w, _ = img.shape
    s = min(h, w)
    top = (h - s) // 2
    left = (w - s) // 2
    sq = img[top : top + s, left : left + s, :]
    if s == side:
        return sq.copy()
    m = resample_matrix(s, side).toarray()
    out = np.einsum("ij,jkc->ikc", m, sq)
    return np.einsum("kj,ijc->ikc", m, out)
