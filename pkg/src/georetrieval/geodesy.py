"""Map-frame poses to WGS-84 coordinates, and ellipsoidal distances.

Direct and inverse geodesics use Vincenty's iterative formulas. The local
tangent-plane helpers (:func:`local_offset`, :func:`offset_to_geo`) are the
small-area affine approximation used for rasters and spatial indexing.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import jsonschema
import numpy as np

from georetrieval import rotations

log = logging.getLogger(__name__)

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
MEAN_RADIUS = (2.0 * WGS84_A + WGS84_B) / 3.0

VINCENTY_TOL = 1e-12
VINCENTY_MAX_ITER = 200


class GeodesicError(RuntimeError):
    """The iterative geodesic solver failed to converge."""


def normalize_lon(lon: float) -> float:
    """Wrap a longitude in degrees to ``[-180, 180)``."""
    lon = math.fmod(lon + 180.0, 360.0)
    if lon < 0.0:
        lon += 360.0
    lon -= 180.0
    # fmod rounding can land exactly on +180
    return -180.0 if lon >= 180.0 else lon


@dataclass(frozen=True)
class GeoPoint:
    """Geodetic position. ``lat``/``lon`` in degrees, ``alt`` in meters."""

    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self) -> None:
        lat = float(self.lat)
        if not (-90.0 <= lat <= 90.0) or math.isnan(lat):
            raise ValueError(f"latitude out of range: {self.lat!r}")
        if not math.isfinite(self.lon):
            raise ValueError(f"longitude not finite: {self.lon!r}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(float(self.lon)))
        object.__setattr__(self, "alt", float(self.alt))


@dataclass(frozen=True)
class LocalPose:
    """Ego pose in a local map frame (x east, y north, z up, meters)."""

    x: float
    y: float
    z: float = 0.0
    rotation: rotations.Quaternion = rotations.IDENTITY
    timestamp_us: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", rotations.check_unit(self.rotation))


@dataclass(frozen=True)
class MapAnchor:
    location_name: str
    origin: GeoPoint


@dataclass(frozen=True)
class InverseResult:
    distance: float
    approximate: bool = False


def planar_bearing_distance(pose: LocalPose) -> Tuple[float, float]:
    """Bearing (radians, clockwise from map +y) and planar distance of a pose."""
    distance = math.hypot(pose.x, pose.y)
    if distance == 0.0:
        return 0.0, 0.0
    return math.atan2(pose.x, pose.y), distance


def geodesic_direct(origin: GeoPoint, bearing: float, distance: float) -> GeoPoint:
    """Destination after ``distance`` meters along initial ``bearing`` (radians from north)."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if distance == 0:
        return origin

    a, b, f = WGS84_A, WGS84_B, WGS84_F
    sin_a1, cos_a1 = math.sin(bearing), math.cos(bearing)
    tan_u1 = (1.0 - f) * math.tan(math.radians(origin.lat))
    cos_u1 = 1.0 / math.sqrt(1.0 + tan_u1 * tan_u1)
    sin_u1 = tan_u1 * cos_u1
    sigma1 = math.atan2(tan_u1, cos_a1)
    sin_alpha = cos_u1 * sin_a1
    cos2_alpha = 1.0 - sin_alpha * sin_alpha
    u2 = cos2_alpha * (a * a - b * b) / (b * b)
    A = 1.0 + u2 / 16384.0 * (4096.0 + u2 * (-768.0 + u2 * (320.0 - 175.0 * u2)))
    B = u2 / 1024.0 * (256.0 + u2 * (-128.0 + u2 * (74.0 - 47.0 * u2)))

    sigma = distance / (b * A)
    for _ in range(VINCENTY_MAX_ITER):
        cos_2sm = math.cos(2.0 * sigma1 + sigma)
        sin_s, cos_s = math.sin(sigma), math.cos(sigma)
        d_sigma = B * sin_s * (
            cos_2sm
            + B / 4.0 * (
                cos_s * (-1.0 + 2.0 * cos_2sm * cos_2sm)
                - B / 6.0 * cos_2sm * (-3.0 + 4.0 * sin_s * sin_s) * (-3.0 + 4.0 * cos_2sm * cos_2sm)
            )
        )
        sigma_next = distance / (b * A) + d_sigma
        if abs(sigma_next - sigma) < VINCENTY_TOL:
            sigma = sigma_next
            break
        sigma = sigma_next
    else:
        raise GeodesicError(f"direct problem did not converge (distance={distance})")

    cos_2sm = math.cos(2.0 * sigma1 + sigma)
    sin_s, cos_s = math.sin(sigma), math.cos(sigma)
    tmp = sin_u1 * sin_s - cos_u1 * cos_s * cos_a1
    lat2 = math.atan2(
        sin_u1 * cos_s + cos_u1 * sin_s * cos_a1,
        (1.0 - f) * math.sqrt(sin_alpha * sin_alpha + tmp * tmp),
    )
    lam = math.atan2(sin_s * sin_a1, cos_u1 * cos_s - sin_u1 * sin_s * cos_a1)
    C = f / 16.0 * cos2_alpha * (4.0 + f * (4.0 - 3.0 * cos2_alpha))
    L = lam - (1.0 - C) * f * sin_alpha * (
        sigma + C * sin_s * (cos_2sm + C * cos_s * (-1.0 + 2.0 * cos_2sm * cos_2sm))
    )
    return GeoPoint(math.degrees(lat2), origin.lon + math.degrees(L), origin.alt)


def great_circle_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance on a sphere of the WGS-84 mean radius."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dl = math.radians(b.lon - a.lon)
    h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * MEAN_RADIUS * math.asin(min(1.0, math.sqrt(h)))


def _wrap_pi(x: float) -> float:
    return (x + math.pi) % (2.0 * math.pi) - math.pi


def solve_inverse(p: GeoPoint, q: GeoPoint) -> InverseResult:
    """Ellipsoidal distance between two points, with an approximation flag.

    Near-antipodal pairs where Vincenty's iteration fails fall back to the
    spherical great-circle distance and are flagged ``approximate``.
    """
    # canonical order keeps the result exactly symmetric
    if (p.lat, p.lon) > (q.lat, q.lon):
        p, q = q, p
    a, b, f = WGS84_A, WGS84_B, WGS84_F
    L = _wrap_pi(math.radians(q.lon - p.lon))
    u1 = math.atan((1.0 - f) * math.tan(math.radians(p.lat)))
    u2 = math.atan((1.0 - f) * math.tan(math.radians(q.lat)))
    sin_u1, cos_u1 = math.sin(u1), math.cos(u1)
    sin_u2, cos_u2 = math.sin(u2), math.cos(u2)

    lam = L
    for _ in range(VINCENTY_MAX_ITER):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cos_u2 * sin_lam, cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam)
        if sin_sigma == 0.0:
            return InverseResult(0.0)
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cos_u1 * cos_u2 * sin_lam / sin_sigma
        cos2_alpha = 1.0 - sin_alpha * sin_alpha
        cos_2sm = cos_sigma - 2.0 * sin_u1 * sin_u2 / cos2_alpha if cos2_alpha != 0.0 else 0.0
        C = f / 16.0 * cos2_alpha * (4.0 + f * (4.0 - 3.0 * cos2_alpha))
        lam_prev = lam
        lam = L + (1.0 - C) * f * sin_alpha * (
            sigma + C * sin_sigma * (cos_2sm + C * cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm))
        )
        if abs(lam - lam_prev) < VINCENTY_TOL:
            break
    else:
        log.warning("inverse geodesic did not converge for %s -> %s; using great circle", p, q)
        return InverseResult(great_circle_distance(p, q), approximate=True)

    uu = cos2_alpha * (a * a - b * b) / (b * b)
    A = 1.0 + uu / 16384.0 * (4096.0 + uu * (-768.0 + uu * (320.0 - 175.0 * uu)))
    B = uu / 1024.0 * (256.0 + uu * (-128.0 + uu * (74.0 - 47.0 * uu)))
    d_sigma = B * sin_sigma * (
        cos_2sm
        + B / 4.0 * (
            cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
            - B / 6.0 * cos_2sm * (-3.0 + 4.0 * sin_sigma * sin_sigma) * (-3.0 + 4.0 * cos_2sm * cos_2sm)
        )
    )
    return InverseResult(b * A * (sigma - d_sigma))


def geodesic_inverse(p: GeoPoint, q: GeoPoint) -> float:
    """Shortest ellipsoidal surface distance in meters (altitude ignored)."""
    return solve_inverse(p, q).distance


def geodesic_inverse_array(lat1: float, lon1: float, lat2: np.ndarray, lon2: np.ndarray) -> np.ndarray:
    """Vectorized Vincenty distance from one point to many (degrees in, meters out).

    Points that fail to converge get the great-circle distance instead.
    """
    lat2 = np.asarray(lat2, dtype=float)
    lon2 = np.asarray(lon2, dtype=float)
    a, b, f = WGS84_A, WGS84_B, WGS84_F
    L = np.radians(lon2 - lon1)
    L = (L + np.pi) % (2.0 * np.pi) - np.pi
    u1 = math.atan((1.0 - f) * math.tan(math.radians(lat1)))
    u2 = np.arctan((1.0 - f) * np.tan(np.radians(lat2)))
    sin_u1, cos_u1 = math.sin(u1), math.cos(u1)
    sin_u2, cos_u2 = np.sin(u2), np.cos(u2)

    lam = L.copy()
    active = np.ones(L.shape, dtype=bool)
    sin_sigma = np.zeros_like(L)
    cos_sigma = np.ones_like(L)
    sigma = np.zeros_like(L)
    cos2_alpha = np.ones_like(L)
    cos_2sm = np.zeros_like(L)
    with np.errstate(invalid="ignore", divide="ignore"):
        for _ in range(VINCENTY_MAX_ITER):
            if not active.any():
                break
            lm = lam[active]
            su2, cu2 = sin_u2[active], cos_u2[active]
            sin_lam, cos_lam = np.sin(lm), np.cos(lm)
            ss = np.hypot(cu2 * sin_lam, cos_u1 * su2 - sin_u1 * cu2 * cos_lam)
            cs = sin_u1 * su2 + cos_u1 * cu2 * cos_lam
            sg = np.arctan2(ss, cs)
            sin_alpha = np.where(ss == 0.0, 0.0, cos_u1 * cu2 * sin_lam / ss)
            c2a = 1.0 - sin_alpha * sin_alpha
            c2sm = np.where(c2a != 0.0, cs - 2.0 * sin_u1 * su2 / c2a, 0.0)
            C = f / 16.0 * c2a * (4.0 + f * (4.0 - 3.0 * c2a))
            new_lam = L[active] + (1.0 - C) * f * sin_alpha * (
                sg + C * ss * (c2sm + C * cs * (-1.0 + 2.0 * c2sm * c2sm))
            )
            idx = np.flatnonzero(active)
            sin_sigma[idx], cos_sigma[idx], sigma[idx] = ss, cs, sg
            cos2_alpha[idx], cos_2sm[idx] = c2a, c2sm
            done = (np.abs(new_lam - lm) < VINCENTY_TOL) | (ss == 0.0)
            lam[idx] = new_lam
            active[idx[done]] = False

    uu = cos2_alpha * (a * a - b * b) / (b * b)
    A = 1.0 + uu / 16384.0 * (4096.0 + uu * (-768.0 + uu * (320.0 - 175.0 * uu)))
    B = uu / 1024.0 * (256.0 + uu * (-128.0 + uu * (74.0 - 47.0 * uu)))
    d_sigma = B * sin_sigma * (
        cos_2sm
        + B / 4.0 * (
            cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
            - B / 6.0 * cos_2sm * (-3.0 + 4.0 * sin_sigma * sin_sigma) * (-3.0 + 4.0 * cos_2sm * cos_2sm)
        )
    )
    dist = b * A * (sigma - d_sigma)
    dist[sin_sigma == 0.0] = 0.0
    if active.any():
        p = GeoPoint(lat1, lon1)
        for i in np.flatnonzero(active):
            dist[i] = great_circle_distance(p, GeoPoint(lat2[i], lon2[i]))
    return dist


def pose_to_geo(anchor: MapAnchor, pose: LocalPose) -> GeoPoint:
    bearing, distance = planar_bearing_distance(pose)
    p = geodesic_direct(anchor.origin, bearing, distance)
    return GeoPoint(p.lat, p.lon, pose.z)


def radii_of_curvature(lat_deg: float) -> Tuple[float, float]:
    """Meridional and prime-vertical radii (meters) at a latitude."""
    s = math.sin(math.radians(lat_deg))
    w = 1.0 - WGS84_E2 * s * s
    return WGS84_A * (1.0 - WGS84_E2) / w**1.5, WGS84_A / math.sqrt(w)


def local_offset(origin: GeoPoint, p: GeoPoint) -> Tuple[float, float]:
    """East/north offset in meters of ``p`` from ``origin`` on the local tangent plane."""
    m, n = radii_of_curvature(origin.lat)
    dlon = normalize_lon(p.lon - origin.lon)
    east = math.radians(dlon) * n * math.cos(math.radians(origin.lat))
    north = math.radians(p.lat - origin.lat) * m
    return east, north


def offset_to_geo(origin: GeoPoint, east: float, north: float) -> GeoPoint:
    """Inverse of :func:`local_offset`."""
    m, n = radii_of_curvature(origin.lat)
    lat = origin.lat + math.degrees(north / m)
    lon = origin.lon + math.degrees(east / (n * math.cos(math.radians(origin.lat))))
    return GeoPoint(lat, lon)


# -- file formats -------------------------------------------------------------

POSE_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["frame_id", "x", "y", "z", "qw", "qx", "qy", "qz", "timestamp_us"],
        "properties": {
            "frame_id": {"type": "string"},
            "x": {"type": "number"},
            "y": {"type": "number"},
            "z": {"type": "number"},
            "qw": {"type": "number"},
            "qx": {"type": "number"},
            "qy": {"type": "number"},
            "qz": {"type": "number"},
            "timestamp_us": {"type": "integer"},
        },
    },
}

ANCHOR_SCHEMA = {
    "type": "object",
    "additionalProperties": {
        "type": "object",
        "required": ["lat", "lon"],
        "properties": {"lat": {"type": "number"}, "lon": {"type": "number"}},
    },
}


class SchemaError(ValueError):
    """An input document does not match the expected schema."""


def _validate(doc, schema, what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"invalid {what}: {exc.message}") from exc


def parse_poses(doc) -> List[Tuple[str, LocalPose]]:
    _validate(doc, POSE_SCHEMA, "pose file")
    out = []
    for rec in doc:
        try:
            pose = LocalPose(
                rec["x"], rec["y"], rec["z"],
                (rec["qw"], rec["qx"], rec["qy"], rec["qz"]),
                rec["timestamp_us"],
            )
        except ValueError as exc:
            raise SchemaError(f"frame {rec['frame_id']}: {exc}") from exc
        out.append((rec["frame_id"], pose))
    return out


def load_poses(path) -> List[Tuple[str, LocalPose]]:
    return parse_poses(json.loads(Path(path).read_text()))


def parse_anchor_registry(doc) -> Dict[str, MapAnchor]:
    _validate(doc, ANCHOR_SCHEMA, "anchor registry")
    try:
        return {name: MapAnchor(name, GeoPoint(v["lat"], v["lon"])) for name, v in doc.items()}
    except ValueError as exc:
        raise SchemaError(f"invalid anchor registry: {exc}") from exc


def load_anchor_registry(path=None) -> Dict[str, MapAnchor]:
    """Load an anchor registry; defaults to the bundled placeholder registry."""
    if path is None:
        path = Path(__file__).with_name("data") / "anchors.json"
    return parse_anchor_registry(json.loads(Path(path).read_text()))


def geo_records(anchor: MapAnchor, poses: Iterable[Tuple[str, LocalPose]]) -> List[dict]:
    """Georeference poses into the ``geo.json`` record layout."""
    records = []
    for frame_id, pose in poses:
        p = pose_to_geo(anchor, pose)
        qw, qx, qy, qz = pose.rotation
        records.append({
            "frame_id": frame_id,
            "timestamp_us": pose.timestamp_us,
            "lat": p.lat,
            "lon": p.lon,
            "alt": p.alt,
            "qw": qw, "qx": qx, "qy": qy, "qz": qz,
        })
    return records


GEO_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["frame_id", "lat", "lon"],
        "properties": {
            "frame_id": {"type": "string"},
            "lat": {"type": "number"},
            "lon": {"type": "number"},
        },
    },
}


@dataclass(frozen=True)
class GeoFrame:
    frame_id: str
    point: GeoPoint
    rotation: rotations.Quaternion = field(default=rotations.IDENTITY)
    timestamp_us: int = 0


def parse_geo_records(doc) -> List[GeoFrame]:
    _validate(doc, GEO_SCHEMA, "geo record file")
    frames = []
    for rec in doc:
        try:
            q = tuple(rec.get(k, d) for k, d in zip(("qw", "qx", "qy", "qz"), rotations.IDENTITY))
            frames.append(GeoFrame(
                rec["frame_id"],
                GeoPoint(rec["lat"], rec["lon"], rec.get("alt", 0.0)),
                rotations.check_unit(q),
                int(rec.get("timestamp_us", 0)),
            ))
        except ValueError as exc:
            raise SchemaError(f"frame {rec['frame_id']}: {exc}") from exc
    return frames
