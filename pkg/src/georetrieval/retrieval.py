"""Nearest-panorama retrieval, frame assignment and the dedup manifest."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from georetrieval.geodesy import (
    WGS84_A,
    WGS84_E2,
    GeoPoint,
    geodesic_inverse_array,
    normalize_lon,
    radii_of_curvature,
)

DEFAULT_THRESHOLD = 25.0
TILES_PER_PANO = 18
LABELS = ("valid", "invalid", "unlabeled")

# lower bound of the meridional radius of curvature (at the equator)
_M_MIN = WGS84_A * (1.0 - WGS84_E2)
# absolute slack (meters) covering Vincenty's own error when bounding candidates
_SLACK = 0.01


class DuplicatePanoId(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    """``pano_id is None`` is the NONE retrieval; its distance is ``inf``."""

    pano_id: Optional[str]
    distance: float
    query_frame: Optional[str] = None

    @property
    def hit(self) -> bool:
        return self.pano_id is not None


class RetrievalIndex:
    """Immutable uniform-grid index over local tangent-plane coordinates.

    Geodesic distance is bounded below by the meridional radius times the
    latitude difference and by the equatorial radius times the longitude
    difference scaled by the largest cosine in the band, so the candidate cell
    range for a query is conservative and results match a full scan exactly.
    """

    def __init__(self, entries: Sequence[Tuple[str, GeoPoint]], cell_size: float = DEFAULT_THRESHOLD):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        ids = [pid for pid, _ in entries]
        seen = set()
        for pid in ids:
            if pid in seen:
                raise DuplicatePanoId(pid)
            seen.add(pid)
        self._ids = tuple(ids)
        self._points = tuple(p for _, p in entries)
        self._lat = np.array([p.lat for p in self._points], dtype=float)
        self._lon = np.array([p.lon for p in self._points], dtype=float)
        self.cell_size = float(cell_size)
        if self._points:
            self._ref = GeoPoint(float(np.mean(self._lat)), self._points[0].lon)
        else:
            self._ref = GeoPoint(0.0, 0.0)
        m, n = radii_of_curvature(self._ref.lat)
        self._m = m
        self._ncos = n * math.cos(math.radians(self._ref.lat))
        self._cells: Dict[Tuple[int, int], List[int]] = defaultdict(list)
        for i, p in enumerate(self._points):
            self._cells[self._cell(*self._plane(p.lat, p.lon))].append(i)
        self._cells = dict(self._cells)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def entries(self) -> List[Tuple[str, GeoPoint]]:
        return list(zip(self._ids, self._points))

    def location(self, pano_id: str) -> GeoPoint:
        return self._points[self._ids.index(pano_id)]

    def _plane(self, lat: float, lon: float) -> Tuple[float, float]:
        east = math.radians(normalize_lon(lon - self._ref.lon)) * self._ncos
        north = math.radians(lat - self._ref.lat) * self._m
        return east, north

    def _cell(self, east: float, north: float) -> Tuple[int, int]:
        return math.floor(east / self.cell_size), math.floor(north / self.cell_size)

    def _candidates(self, query: GeoPoint, radius: float) -> np.ndarray:
        r = radius * (1.0 + 1e-9) + _SLACK
        dlat = math.degrees(r / _M_MIN)
        lat_lo, lat_hi = query.lat - dlat, query.lat + dlat
        band = max(abs(lat_lo), abs(lat_hi))
        everything = np.arange(len(self._ids))
        if band >= 89.0:
            return everything
        dlon = math.degrees(r / (WGS84_A * math.cos(math.radians(band))))
        qd = normalize_lon(query.lon - self._ref.lon)
        if abs(qd) + dlon >= 180.0:
            return everything
        e0, n0 = self._plane(lat_lo, query.lon - dlon)
        e1, n1 = self._plane(lat_hi, query.lon + dlon)
        cx0, cy0 = self._cell(e0, n0)
        cx1, cy1 = self._cell(e1, n1)
        if (cx1 - cx0 + 1) * (cy1 - cy0 + 1) > max(64, len(self._cells)):
            return everything
        found: List[int] = []
        for cx in range(cx0, cx1 + 1):
            for cy in range(cy0, cy1 + 1):
                found.extend(self._cells.get((cx, cy), ()))
        return np.array(sorted(found), dtype=np.int64)

    def nearest(self, query: GeoPoint, threshold: float = DEFAULT_THRESHOLD,
                frame_id: Optional[str] = None) -> RetrievalResult:
        if not threshold > 0:
            raise ValueError("threshold must be positive")
        cand = self._candidates(query, threshold) if self._ids else np.array([], dtype=np.int64)
        if cand.size == 0:
            return RetrievalResult(None, math.inf, frame_id)
        dist = geodesic_inverse_array(query.lat, query.lon, self._lat[cand], self._lon[cand])
        return _pick(dist, [self._ids[i] for i in cand], threshold, frame_id)


def _pick(dist: np.ndarray, ids: Sequence[str], threshold: float, frame_id: Optional[str]) -> RetrievalResult:
    best = min(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    if dist[best] > threshold:
        return RetrievalResult(None, math.inf, frame_id)
    return RetrievalResult(ids[best], float(dist[best]), frame_id)


def build_index(entries: Iterable[Tuple[str, GeoPoint]], cell_size: float = DEFAULT_THRESHOLD) -> RetrievalIndex:
    return RetrievalIndex(list(entries), cell_size)


def nearest(index: RetrievalIndex, query: GeoPoint, threshold: float = DEFAULT_THRESHOLD,
            frame_id: Optional[str] = None) -> RetrievalResult:
    """Closest panorama within ``threshold`` meters, else NONE.

    A panorama exactly at the threshold is a hit. Equal distances go to the
    lexicographically smallest ``pano_id``.
    """
    return index.nearest(query, threshold, frame_id)


# -- manifest ---------------------------------------------------------------------------

@dataclass
class FrameEntry:
    pano_id: Optional[str]
    distance_m: Optional[float]
    label: str = "unlabeled"

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ManifestError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class PanoRecord:
    location: GeoPoint
    files: Dict[str, str] = field(default_factory=dict)


@dataclass
class Manifest:
    panos: Dict[str, PanoRecord] = field(default_factory=dict)
    frames: Dict[str, FrameEntry] = field(default_factory=dict)

    def check(self) -> None:
        for fid, entry in self.frames.items():
            if entry.pano_id is not None and entry.pano_id not in self.panos:
                raise ManifestError(f"frame {fid} references unknown pano {entry.pano_id}")

    def used_panos(self) -> List[str]:
        return sorted({e.pano_id for e in self.frames.values() if e.pano_id is not None})

    def merge(self, other: "Manifest") -> "Manifest":
        """Combine two manifests; ``other`` wins on assignments.

        A frame keeps its reliability label only while it stays mapped to the
        same panorama and ``other`` has no label of its own.
        """
        panos = {pid: PanoRecord(r.location, dict(r.files)) for pid, r in self.panos.items()}
        for pid, rec in other.panos.items():
            if pid in panos:
                panos[pid].files.update(rec.files)
                panos[pid].location = rec.location
            else:
                panos[pid] = PanoRecord(rec.location, dict(rec.files))
        frames = {fid: FrameEntry(e.pano_id, e.distance_m, e.label) for fid, e in self.frames.items()}
        for fid, e in other.frames.items():
            label = e.label
            old = frames.get(fid)
            if label == "unlabeled" and old is not None and old.pano_id == e.pano_id:
                label = old.label
            frames[fid] = FrameEntry(e.pano_id, e.distance_m, label)
        merged = Manifest(panos, frames)
        merged.check()
        return merged

    def set_label(self, frame_id: str, label: str) -> None:
        entry = self.frames[frame_id]
        self.frames[frame_id] = FrameEntry(entry.pano_id, entry.distance_m, label)

    def training_labels(self) -> Dict[str, int]:
        """Binary reliability targets: 1 valid, 0 invalid or missing; unlabeled hits excluded."""
        out = {}
        for fid, e in self.frames.items():
            if e.pano_id is None:
                out[fid] = 0
            elif e.label != "unlabeled":
                out[fid] = int(e.label == "valid")
        return out

    def to_dict(self) -> dict:
        return {
            "panos": {
                pid: {"lat": r.location.lat, "lon": r.location.lon, **r.files}
                for pid, r in self.panos.items()
            },
            "frames": {
                fid: {"pano_id": e.pano_id, "distance_m": e.distance_m, "label": e.label}
                for fid, e in self.frames.items()
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Manifest":
        try:
            panos = {}
            for pid, rec in doc.get("panos", {}).items():
                files = {k: v for k, v in rec.items() if k not in ("lat", "lon")}
                panos[pid] = PanoRecord(GeoPoint(rec["lat"], rec["lon"]), files)
            frames = {
                fid: FrameEntry(rec.get("pano_id"), rec.get("distance_m"), rec.get("label", "unlabeled"))
                for fid, rec in doc.get("frames", {}).items()
            }
        except (KeyError, TypeError, AttributeError) as exc:
            raise ManifestError(f"malformed manifest: {exc!r}") from exc
        m = cls(panos, frames)
        m.check()
        return m

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        self.check()
        p = Path(path)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(self.dumps())
        tmp.replace(p)


def assign_frames(index: RetrievalIndex, frames: Iterable[Tuple[str, GeoPoint]],
                  threshold: float = DEFAULT_THRESHOLD) -> Manifest:
    """Map every frame to its nearest panorama independently (many-to-one allowed)."""
    manifest = Manifest()
    for frame_id, point in frames:
        res = index.nearest(point, threshold, frame_id)
        if res.hit:
            manifest.frames[frame_id] = FrameEntry(res.pano_id, res.distance)
            if res.pano_id not in manifest.panos:
                manifest.panos[res.pano_id] = PanoRecord(index.location(res.pano_id))
        else:
            manifest.frames[frame_id] = FrameEntry(None, None)
    return manifest


# -- storage accounting ---------------------------------------------------------------------

@dataclass(frozen=True)
class StorageReport:
    dedup_bytes: int
    naive_bytes: int
    reduction_fraction: float

    def to_dict(self) -> dict:
        return {"dedup_bytes": self.dedup_bytes, "naive_bytes": self.naive_bytes,
                "reduction_fraction": self.reduction_fraction}


def storage_report(manifest: Optional[Manifest], frames_count: int, cameras_per_frame: int,
                   tile_bytes: int, crop_bytes: int, pano_count: Optional[int] = None,
                   tiles_per_pano: int = TILES_PER_PANO) -> StorageReport:
    """Bytes stored with panorama dedup versus downloading one crop per camera per frame.

    The panorama count comes from ``manifest`` (distinct referenced panoramas)
    unless ``pano_count`` is given.
    """
    if min(tile_bytes, crop_bytes) <= 0:
        raise ValueError("byte sizes must be positive")
    if pano_count is None:
        if manifest is None:
            raise ValueError("need a manifest or an explicit pano_count")
        pano_count = len(manifest.used_panos())
    dedup = pano_count * tiles_per_pano * tile_bytes
    naive = frames_count * cameras_per_frame * crop_bytes
    return StorageReport(dedup, naive, 1.0 - dedup / naive)
