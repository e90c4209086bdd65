"""Georeferenced satellite mosaics and pose-aligned crops.

The mosaic is north-up with image ``y`` growing southward. Its ``anchor`` is
the geodetic position of continuous pixel coordinate ``(0, 0)``, the top-left
corner of the raster. Latitude/longitude map affinely to pixels through the
local tangent plane at the anchor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from georetrieval import raster
from georetrieval.geodesy import GeoPoint, local_offset, offset_to_geo

DEFAULT_GSD = 0.15
DEFAULT_CROP_SIZE = 400
FILL_VALUE = 128


class OutOfFootprint(ValueError):
    """The requested location lies outside the mosaic."""


@dataclass(frozen=True)
class SatMosaic:
    pixels: np.ndarray
    anchor: GeoPoint
    gsd: float = DEFAULT_GSD

    def __post_init__(self) -> None:
        if not self.gsd > 0:
            raise ValueError("gsd must be positive")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class SatCrop:
    pixels: np.ndarray
    padded_fraction: float

    @property
    def padded(self) -> bool:
        return self.padded_fraction > 0.0


def geo_to_pixel(mosaic: SatMosaic, p: GeoPoint, strict: bool = True) -> Tuple[float, float]:
    east, north = local_offset(mosaic.anchor, p)
    x = east / mosaic.gsd
    y = -north / mosaic.gsd
    if strict and not (0.0 <= x <= mosaic.width and 0.0 <= y <= mosaic.height):
        raise OutOfFootprint(f"{p} maps to ({x:.1f}, {y:.1f}) outside {mosaic.width}x{mosaic.height}")
    return x, y


def pixel_to_geo(mosaic: SatMosaic, x: float, y: float) -> GeoPoint:
    return offset_to_geo(mosaic.anchor, x * mosaic.gsd, -y * mosaic.gsd)


def pose_crop(mosaic: SatMosaic, ego: GeoPoint, yaw: float, size: int = DEFAULT_CROP_SIZE) -> SatCrop:
    """Square crop centered on the ego, turned so the ego's forward axis points right.

    ``yaw`` is the ego heading in radians, counter-clockwise from east (map x
    axis), so ``yaw = 0`` faces east and needs no rotation. In the crop, +x is
    forward and -y (up) is the vehicle's left. Samples falling outside the
    mosaic are filled with mid-gray and counted in ``padded_fraction``.
    """
    cx, cy = geo_to_pixel(mosaic, ego, strict=False)
    offs = (np.arange(size, dtype=float) + 0.5 - size / 2.0)
    du, dv = np.meshgrid(offs, offs)
    forward, left = du, -dv
    c, s = math.cos(yaw), math.sin(yaw)
    east = forward * c - left * s
    north = forward * s + left * c
    x = cx + east
    y = cy - north
    inside = (x >= 0) & (x <= mosaic.width) & (y >= 0) & (y <= mosaic.height)
    if not inside.any():
        raise OutOfFootprint(f"crop around {ego} does not overlap the mosaic")
    out, _ = raster.bilinear_sample(mosaic.pixels, x, y)
    out[~inside] = FILL_VALUE
    if mosaic.pixels.dtype == np.uint8:
        out = raster.to_uint8(out)
    return SatCrop(out, float(1.0 - inside.mean()))


def ground_coords(size: int, gsd: float, bounds: Sequence[float]) -> np.ndarray:
    """Normalized ego-frame ground coordinates of crop pixels, shape ``(size, size, 3)``.

    Pixel centers map to (forward, left, 0) meters, then each axis is scaled
    into ``bounds = (x_min, y_min, z_min, x_max, y_max, z_max)`` and clamped.
    """
    lo = np.asarray(bounds[:3], dtype=float)
    hi = np.asarray(bounds[3:], dtype=float)
    offs = (np.arange(size, dtype=float) + 0.5 - size / 2.0) * gsd
    du, dv = np.meshgrid(offs, offs)
    pts = np.stack([du, -dv, np.zeros_like(du)], axis=-1)
    return np.clip((pts - lo) / (hi - lo), 0.0, 1.0)


def load_mosaic(png_path, sidecar_path=None) -> SatMosaic:
    """Load a mosaic PNG and its ``{lat, lon, gsd}`` sidecar (default: same stem, ``.json``)."""
    png_path = Path(png_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else png_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text())
    return SatMosaic(raster.load_png(png_path), GeoPoint(meta["lat"], meta["lon"]),
                     float(meta.get("gsd", DEFAULT_GSD)))


def save_mosaic(mosaic: SatMosaic, png_path) -> None:
    png_path = Path(png_path)
    raster.save_png(png_path, mosaic.pixels)
    png_path.with_suffix(".json").write_text(json.dumps(
        {"lat": mosaic.anchor.lat, "lon": mosaic.anchor.lon, "gsd": mosaic.gsd}, sort_keys=True) + "\n")
