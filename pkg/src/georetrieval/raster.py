"""Raster sampling and image I/O shared by the panorama, satellite and gate code.

Continuous pixel coordinates put the center of pixel ``(i, j)`` at
``(x, y) = (j + 0.5, i + 0.5)``. Rasters are ``(H, W)`` or ``(H, W, C)``
arrays on a 0-255 intensity scale, either ``uint8`` or floating point.
"""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image


def _indices(x: np.ndarray, y: np.ndarray, width: int, height: int, wrap_x: bool):
    fx = np.asarray(x, dtype=float) - 0.5
    fy = np.asarray(y, dtype=float) - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    wx = fx - x0
    wy = fy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    if wrap_x:
        x0 %= width
        x1 %= width
    else:
        x0 = np.clip(x0, 0, width - 1)
        x1 = np.clip(x1, 0, width - 1)
    y0 = np.clip(y0, 0, height - 1)
    y1 = np.clip(y1, 0, height - 1)
    return x0, x1, y0, y1, wx, wy


def bilinear_sample(
    img: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    wrap_x: bool = False,
    mask: np.ndarray | None = None,
) -> Tuple[np.ndarray, np.ndarray | None]:
    """Sample ``img`` at continuous coordinates.

    Edges are clamped; with ``wrap_x`` the horizontal axis is periodic, as for
    the azimuth of an equirectangular panorama. When ``mask`` is given the
    second return value is true only where all four source pixels are masked in.
    Output is float64.
    """
    h, w = img.shape[:2]
    x0, x1, y0, y1, wx, wy = _indices(x, y, w, h, wrap_x)
    src = img.astype(np.float64, copy=False)
    if src.ndim == 3:
        wx = wx[..., None]
        wy = wy[..., None]
    top = src[y0, x0] * (1.0 - wx) + src[y0, x1] * wx
    bottom = src[y1, x0] * (1.0 - wx) + src[y1, x1] * wx
    out = top * (1.0 - wy) + bottom * wy
    valid = None
    if mask is not None:
        valid = mask[y0, x0] & mask[y0, x1] & mask[y1, x0] & mask[y1, x1]
    return out, valid


def nearest_sample(
    img: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    wrap_x: bool = False,
    mask: np.ndarray | None = None,
) -> Tuple[np.ndarray, np.ndarray | None]:
    h, w = img.shape[:2]
    xi = np.floor(np.asarray(x, dtype=float)).astype(np.int64)
    yi = np.clip(np.floor(np.asarray(y, dtype=float)).astype(np.int64), 0, h - 1)
    xi = xi % w if wrap_x else np.clip(xi, 0, w - 1)
    out = img[yi, xi].astype(np.float64)
    return out, (mask[yi, xi] if mask is not None else None)


def to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an RGB raster; single-channel input passes through as float."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    if a.shape[2] == 1:
        return a[..., 0]
    return 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample to ``(height, width)`` by sampling at the target pixel centers."""
    h, w = img.shape[:2]
    xs = (np.arange(width) + 0.5) * (w / width)
    ys = (np.arange(height) + 0.5) * (h / height)
    xx, yy = np.meshgrid(xs, ys)
    out, _ = bilinear_sample(img, xx, yy)
    return out


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0, where: np.ndarray | None = None) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if where is not None:
        diff = diff[where]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im).copy()


def save_mask(path, mask: np.ndarray) -> None:
    """Store a boolean mask as a 1-bit PNG."""
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("L")) > 0
