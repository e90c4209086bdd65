"""Equirectangular panoramas: tile projection, stitching and virtual-view synthesis.

Azimuth ``theta`` is measured clockwise from north in ``[-pi, pi)`` and
elevation ``phi`` is positive upward. In the panorama frame (x east, y down,
z north) a direction is ``(cos(phi) sin(theta), -sin(phi), cos(phi) cos(theta))``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from georetrieval import raster
from georetrieval.camera import (
    Intrinsics,
    Pose,
    heading_pitch_rotation,
    pixel_to_ray,
    project_to_pixels,
)
from georetrieval import rotations
from georetrieval.geodesy import GeoPoint

DEFAULT_HEADINGS: Tuple[float, ...] = tuple(float(h) for h in range(0, 360, 20))
DEFAULT_WIDTH = 4096
DEFAULT_HEIGHT = 2048

_SAMPLERS = {"bilinear": raster.bilinear_sample, "nearest": raster.nearest_sample}


class MissingTileWarning(UserWarning):
    """Stitching ran with fewer tiles than headings; coverage has gaps."""


@dataclass
class EquirectPanorama:
    pixels: np.ndarray
    mask: np.ndarray
    pano_id: str
    capture: GeoPoint
    capture_date: Optional[str] = None
    headings_present: Tuple[float, ...] = ()
    missing_headings: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        h, w = self.pixels.shape[:2]
        if w != 2 * h:
            raise ValueError(f"equirectangular raster must be 2:1, got {w}x{h}")
        if self.mask.shape != (h, w):
            raise ValueError("mask shape does not match pixels")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def complete(self) -> bool:
        return not self.missing_headings

    @classmethod
    def blank(cls, width: int, height: int, pano_id: str, capture: GeoPoint,
              channels: int = 3, dtype=np.uint8, **kw) -> "EquirectPanorama":
        return cls(
            np.zeros((height, width, channels), dtype=dtype),
            np.zeros((height, width), dtype=bool),
            pano_id, capture, **kw,
        )


@dataclass
class PerspectiveTile:
    pixels: np.ndarray
    intrinsics: Intrinsics
    heading: float
    pitch: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.heading < 360.0:
            raise ValueError(f"heading must be in [0, 360), got {self.heading}")
        h, w = self.pixels.shape[:2]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("tile raster size does not match its intrinsics")

    @property
    def rotation(self) -> rotations.Quaternion:
        return heading_pitch_rotation(math.radians(self.heading), math.radians(self.pitch))


def dir_to_equirect(theta, phi, W, H):
    x = W / (2 * math.pi) * (theta + math.pi)
    y = H / math.pi * (math.pi / 2 - phi)
    return x, y


def equirect_to_dir(x, y, W, H):
    theta = x * (2 * math.pi / W) - math.pi
    phi = math.pi / 2 - y * (math.pi / H)
    return theta, phi


def direction_from_angles(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    c = np.cos(phi)
    return np.stack(np.broadcast_arrays(c * np.sin(theta), -np.sin(phi), c * np.cos(theta)), axis=-1)


def angles_from_direction(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=float)
    theta = np.arctan2(d[..., 0], d[..., 2])
    theta = np.where(theta >= math.pi, -math.pi, theta)
    phi = np.arcsin(np.clip(-d[..., 1], -1.0, 1.0))
    return theta, phi


def _wrap_deg(a):
    return (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0


def _column_angles(W: int) -> np.ndarray:
    theta, _ = equirect_to_dir(np.arange(W) + 0.5, 0.0, W, 1)
    return theta


def _row_angles(H: int) -> np.ndarray:
    _, phi = equirect_to_dir(0.0, np.arange(H) + 0.5, 2 * H, H)
    return phi


def _sample_tile(tile: PerspectiveTile, dirs: np.ndarray, interpolation: str):
    """Colors of panorama-frame directions as seen by ``tile``; invalid outside its frustum."""
    R = rotations.to_matrix(tile.rotation)
    local = dirs @ R
    u, v, front = project_to_pixels(tile.intrinsics, local)
    K = tile.intrinsics
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    u = np.where(inside, u, 0.5)
    v = np.where(inside, v, 0.5)
    colors, _ = _SAMPLERS[interpolation](tile.pixels, u, v)
    return colors, inside


def _tile_extent(tile: PerspectiveTile, W: int, H: int) -> Tuple[np.ndarray, np.ndarray]:
    """Candidate panorama columns and rows for a tile (conservative)."""
    if tile.pitch != 0.0:
        return np.arange(W), np.arange(H)
    px = 360.0 / W
    half_h = math.degrees(tile.intrinsics.hfov) / 2.0 + px
    half_v = math.degrees(tile.intrinsics.vfov) / 2.0 + px
    cols = np.flatnonzero(np.abs(_wrap_deg(np.degrees(_column_angles(W)) - tile.heading)) <= half_h)
    rows = np.flatnonzero(np.abs(np.degrees(_row_angles(H))) <= half_v)
    return cols, rows


def _write(pixels: np.ndarray, mask: np.ndarray, tile: PerspectiveTile,
           cols: np.ndarray, rows: np.ndarray, interpolation: str) -> None:
    if cols.size == 0 or rows.size == 0:
        return
    H, W = mask.shape
    theta = _column_angles(W)[cols]
    phi = _row_angles(H)[rows]
    tt, pp = np.meshgrid(theta, phi)
    colors, inside = _sample_tile(tile, direction_from_angles(tt, pp), interpolation)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr[inside], cc[inside]
    c = colors[inside]
    if c.ndim == 1:
        c = c[:, None]
    if pixels.dtype == np.uint8:
        c = raster.to_uint8(c)
    pixels[rr, cc] = c.reshape((-1,) + pixels.shape[2:])
    mask[rr, cc] = True


def project_tile(pano: EquirectPanorama, tile: PerspectiveTile,
                 interpolation: str = "bilinear") -> EquirectPanorama:
    """Write every panorama pixel whose direction lies in the tile's frustum.

    Implemented as an inverse warp (iterate panorama pixels, sample the tile).
    Returns a new panorama; pixels outside the frustum are left untouched.
    """
    pixels = pano.pixels.copy()
    mask = pano.mask.copy()
    cols, rows = _tile_extent(tile, pano.width, pano.height)
    _write(pixels, mask, tile, cols, rows, interpolation)
    present = tuple(sorted(set(pano.headings_present) | {tile.heading}))
    return replace(pano, pixels=pixels, mask=mask, headings_present=present)


def _heading_owner(W: int, headings: Sequence[float]) -> np.ndarray:
    """Index of the angularly nearest heading for every panorama column."""
    col_deg = np.degrees(_column_angles(W))
    diffs = np.abs(_wrap_deg(col_deg[:, None] - np.asarray(headings)[None, :]))
    return np.argmin(diffs, axis=1)


def stitch(
    tiles: Iterable[PerspectiveTile],
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    capture: GeoPoint = GeoPoint(0.0, 0.0),
    pano_id: str = "",
    headings: Sequence[float] = DEFAULT_HEADINGS,
    capture_date: Optional[str] = None,
    interpolation: str = "bilinear",
) -> EquirectPanorama:
    """Composite perspective tiles into an equirectangular panorama.

    Each panorama column belongs to the expected heading nearest to it, and
    only that heading's tile may write there. A missing tile therefore leaves
    its slot uncovered; the panorama records it in ``missing_headings`` and a
    :class:`MissingTileWarning` is emitted. Tiles at unexpected headings are
    ignored.
    """
    tiles = list(tiles)
    by_heading: Dict[int, PerspectiveTile] = {}
    for tile in tiles:
        for k, h in enumerate(headings):
            if abs(_wrap_deg(tile.heading - h)) < 1e-6:
                by_heading.setdefault(k, tile)
                break
        else:
            warnings.warn(f"tile at unexpected heading {tile.heading} ignored", MissingTileWarning)

    if tiles:
        sample = tiles[0].pixels
        extra = sample.shape[2:]
        dtype = np.uint8 if sample.dtype == np.uint8 else np.float32
    else:
        extra, dtype = (3,), np.uint8
    pixels = np.zeros((height, width) + extra, dtype=dtype)
    mask = np.zeros((height, width), dtype=bool)

    owner = _heading_owner(width, headings)
    for k, tile in by_heading.items():
        cols, rows = _tile_extent(tile, width, height)
        cols = cols[owner[cols] == k]
        _write(pixels, mask, tile, cols, rows, interpolation)

    missing = tuple(float(h) for k, h in enumerate(headings) if k not in by_heading)
    if missing:
        warnings.warn(f"panorama {pano_id!r} missing headings {missing}", MissingTileWarning)
    return EquirectPanorama(
        pixels, mask, pano_id, capture, capture_date,
        headings_present=tuple(float(headings[k]) for k in sorted(by_heading)),
        missing_headings=missing,
    )


def synthesize_view(
    pano: EquirectPanorama,
    K: Intrinsics,
    pose: Pose,
    interpolation: str = "bilinear",
    workers: int = 1,
    block_rows: int = 128,
) -> Tuple[np.ndarray, np.ndarray]:
    """Render a pinhole view of the panorama and its validity mask.

    A pixel is valid only if every panorama pixel that contributes to its
    sample is covered by the panorama mask.
    """
    R = pose.R
    sampler = _SAMPLERS[interpolation]
    W, H = pano.width, pano.height
    u = np.arange(K.width, dtype=float) + 0.5
    out_dtype = pano.pixels.dtype if pano.pixels.dtype == np.uint8 else np.float64
    image = np.zeros((K.height, K.width) + pano.pixels.shape[2:], dtype=out_dtype)
    valid = np.zeros((K.height, K.width), dtype=bool)

    def render(r0: int) -> None:
        r1 = min(r0 + block_rows, K.height)
        uu, vv = np.meshgrid(u, np.arange(r0, r1, dtype=float) + 0.5)
        rays = pixel_to_ray(K, uu, vv) @ R.T
        theta, phi = angles_from_direction(rays)
        x, y = dir_to_equirect(theta, phi, W, H)
        colors, ok = sampler(pano.pixels, x, y, wrap_x=True, mask=pano.mask)
        image[r0:r1] = raster.to_uint8(colors) if out_dtype == np.uint8 else colors
        valid[r0:r1] = ok

    starts = range(0, K.height, block_rows)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(render, starts))
    else:
        for r0 in starts:
            render(r0)
    return image, valid


# -- persistence ------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def sidecar(pano: EquirectPanorama) -> dict:
    return {
        "pano_id": pano.pano_id,
        "lat": pano.capture.lat,
        "lon": pano.capture.lon,
        "capture_date": pano.capture_date,
        "width": pano.width,
        "height": pano.height,
        "headings_present": list(pano.headings_present),
        "missing_headings": list(pano.missing_headings),
    }


def save_panorama(pano: EquirectPanorama, directory) -> Dict[str, Path]:
    """Write ``pano.png``, ``mask.png`` and the ``meta.json`` sidecar (with checksums)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"pano": d / "pano.png", "mask": d / "mask.png", "meta": d / "meta.json"}
    raster.save_png(paths["pano"], pano.pixels)
    raster.save_mask(paths["mask"], pano.mask)
    meta = sidecar(pano)
    meta["sha256"] = {"pano.png": _sha256(paths["pano"]), "mask.png": _sha256(paths["mask"])}
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


class CacheCorruption(RuntimeError):
    """A cached panorama file does not match its recorded checksum."""


def verify_panorama(directory) -> dict:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    for name, digest in meta.get("sha256", {}).items():
        f = d / name
        if not f.exists() or _sha256(f) != digest:
            raise CacheCorruption(f"checksum mismatch for {f}")
    return meta


def load_panorama(directory, verify: bool = True) -> EquirectPanorama:
    d = Path(directory)
    meta = verify_panorama(d) if verify else json.loads((d / "meta.json").read_text())
    return EquirectPanorama(
        raster.load_png(d / "pano.png"),
        raster.load_mask(d / "mask.png"),
        meta["pano_id"],
        GeoPoint(meta["lat"], meta["lon"]),
        meta.get("capture_date"),
        tuple(meta.get("headings_present", ())),
        tuple(meta.get("missing_headings", ())),
    )
