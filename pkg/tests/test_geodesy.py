import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from georetrieval import geodesy
from georetrieval.geodesy import (
    WGS84_A,
    WGS84_E2,
    GeoPoint,
    LocalPose,
    MapAnchor,
    SchemaError,
    geodesic_direct,
    geodesic_inverse,
    geodesic_inverse_array,
    planar_bearing_distance,
    pose_to_geo,
    solve_inverse,
)

# Direct-problem destinations computed with geographiclib (Karney) on WGS-84:
# (lat1, lon1, azimuth deg, distance m) -> (lat2, lon2)
DIRECT_VECTORS = [
    ((42.336, -71.052, 0.0, 500.0), (42.34050126618737, -71.052)),
    ((1.2907, 103.8517, 45.0, 1500.0), (1.3002922195987447, 103.861230510136)),
    ((42.336, -71.052, 123.4, 3000.0), (42.32112878695221, -71.02161718273577)),
    ((-33.86, 151.21, 270.0, 4800.0), (-33.859989085755885, 151.15812833981653)),
]

EQUATOR_10KM_LON = math.degrees(10000.0 / WGS84_A)


def test_geopoint_normalizes_longitude():
    assert GeoPoint(0, 180).lon == -180.0
    assert GeoPoint(0, 190).lon == pytest.approx(-170.0)
    assert GeoPoint(0, -180).lon == -180.0


@pytest.mark.parametrize("lat", [-90.0001, 91, math.nan])
def test_geopoint_rejects_bad_latitude(lat):
    with pytest.raises(ValueError):
        GeoPoint(lat, 0)


def test_local_pose_requires_unit_quaternion():
    with pytest.raises(ValueError):
        LocalPose(0, 0, 0, (1.0, 0.1, 0.0, 0.0))


@pytest.mark.parametrize(
    "x, y, bearing, dist",
    [(0, 0, 0.0, 0.0), (1, 0, math.pi / 2, 1.0), (3, 4, math.atan2(3, 4), 5.0), (0, -2, math.pi, 2.0)],
)
def test_planar_bearing_distance(x, y, bearing, dist):
    b, d = planar_bearing_distance(LocalPose(x, y))
    assert b == pytest.approx(bearing)
    assert d == pytest.approx(dist)


@pytest.mark.parametrize(
    "x, y, lo, hi",
    [(1, 1, 0, math.pi / 2), (1, -1, math.pi / 2, math.pi), (-1, -1, -math.pi, -math.pi / 2),
     (-1, 1, -math.pi / 2, 0)],
)
def test_bearing_quadrants(x, y, lo, hi):
    b, _ = planar_bearing_distance(LocalPose(x, y))
    assert lo < b < hi


@pytest.mark.parametrize("args, expected", DIRECT_VECTORS)
def test_direct_matches_reference(args, expected):
    lat, lon, az, d = args
    p = geodesic_direct(GeoPoint(lat, lon), math.radians(az), d)
    assert p.lat == pytest.approx(expected[0], abs=1e-9)
    assert p.lon == pytest.approx(expected[1], abs=1e-9)


def test_direct_zero_distance_is_identity():
    o = GeoPoint(12.5, 77.25)
    assert geodesic_direct(o, 1.234, 0.0) == o


def test_direct_along_equator_is_exact():
    p = geodesic_direct(GeoPoint(0, 0), math.pi / 2, 10000.0)
    assert p.lat == pytest.approx(0.0, abs=1e-12)
    assert p.lon == pytest.approx(EQUATOR_10KM_LON, abs=1e-11)


def test_direct_rejects_negative_distance():
    with pytest.raises(ValueError):
        geodesic_direct(GeoPoint(0, 0), 0.0, -1.0)


def test_inverse_basic_cases():
    p = GeoPoint(35.0, 139.0)
    assert geodesic_inverse(p, p) == 0.0
    d = geodesic_inverse(GeoPoint(0, 0), GeoPoint(0, EQUATOR_10KM_LON))
    assert d == pytest.approx(10000.0, abs=1e-3)


def test_inverse_near_antipodal_falls_back():
    res = solve_inverse(GeoPoint(0.0, 0.0), GeoPoint(0.5, 179.7))
    assert res.approximate
    assert res.distance == pytest.approx(geodesy.great_circle_distance(GeoPoint(0.0, 0.0), GeoPoint(0.5, 179.7)))


def test_inverse_array_matches_scalar():
    rng = np.random.default_rng(3)
    o = GeoPoint(48.1, 11.6)
    pts = [geodesic_direct(o, rng.uniform(0, 2 * math.pi), rng.uniform(0, 5000)) for _ in range(50)]
    arr = geodesic_inverse_array(o.lat, o.lon, np.array([p.lat for p in pts]), np.array([p.lon for p in pts]))
    ref = [geodesic_inverse(o, p) for p in pts]
    np.testing.assert_allclose(arr, ref, rtol=0, atol=1e-9)


positions = st.tuples(st.floats(-80, 80), st.floats(-180, 179.999))


@settings(max_examples=200, deadline=None)
@given(positions, st.floats(0, 2 * math.pi), st.floats(0, 5000))
def test_direct_inverse_round_trip(pos, bearing, dist):
    o = GeoPoint(*pos)
    assert geodesic_inverse(o, geodesic_direct(o, bearing, dist)) == pytest.approx(dist, abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(positions, positions)
def test_inverse_is_symmetric(a, b):
    p, q = GeoPoint(*a), GeoPoint(*b)
    assert geodesic_inverse(p, q) == pytest.approx(geodesic_inverse(q, p), rel=1e-12, abs=1e-9)


def test_pose_to_geo_cases():
    anchor = MapAnchor("here", GeoPoint(42.0, -71.0))
    origin = pose_to_geo(anchor, LocalPose(0, 0, 1.5))
    assert (origin.lat, origin.lon, origin.alt) == (42.0, -71.0, 1.5)
    eq = pose_to_geo(MapAnchor("eq", GeoPoint(0, 0)), LocalPose(10000, 0))
    assert eq.lat == pytest.approx(0.0, abs=1e-12)
    assert eq.lon == pytest.approx(EQUATOR_10KM_LON, abs=1e-11)


def test_pose_to_geo_straight_line_is_monotone():
    anchor = MapAnchor("here", GeoPoint(1.29, 103.85))
    lats = [pose_to_geo(anchor, LocalPose(0.3 * i, 10.0 * i)).lat for i in range(200)]
    assert all(b > a for a, b in zip(lats, lats[1:]))


def _enu_to_geodetic(origin: GeoPoint, east: float, north: float):
    """Exact tangent-plane point (ENU -> ECEF) projected to geodetic lat/lon."""
    lat0, lon0 = math.radians(origin.lat), math.radians(origin.lon)
    N0 = WGS84_A / math.sqrt(1 - WGS84_E2 * math.sin(lat0) ** 2)
    x0 = N0 * math.cos(lat0) * math.cos(lon0)
    y0 = N0 * math.cos(lat0) * math.sin(lon0)
    z0 = N0 * (1 - WGS84_E2) * math.sin(lat0)
    sl, cl, sp, cp = math.sin(lon0), math.cos(lon0), math.sin(lat0), math.cos(lat0)
    x = x0 - sl * east - sp * cl * north
    y = y0 + cl * east - sp * sl * north
    z = z0 + cp * north
    lon = math.atan2(y, x)
    r = math.hypot(x, y)
    lat = math.atan2(z, r * (1 - WGS84_E2))
    for _ in range(10):
        N = WGS84_A / math.sqrt(1 - WGS84_E2 * math.sin(lat) ** 2)
        h = r / math.cos(lat) - N
        lat = math.atan2(z, r * (1 - WGS84_E2 * N / (N + h)))
    return GeoPoint(math.degrees(lat), math.degrees(lon))


@pytest.mark.parametrize("anchor", [GeoPoint(42.336849169438615, -71.05785369873047), GeoPoint(1.2882, 103.7845)])
def test_pose_to_geo_close_to_tangent_plane_over_map_extent(anchor):
    rng = np.random.default_rng(0)
    for x, y in rng.uniform(0, 6000, size=(200, 2)):
        g = pose_to_geo(MapAnchor("m", anchor), LocalPose(x, y))
        assert geodesic_inverse(g, _enu_to_geodetic(anchor, x, y)) < 0.5


def test_parse_poses_and_records():
    doc = [{"frame_id": "a", "x": 3.0, "y": 4.0, "z": 0.2, "qw": 1, "qx": 0, "qy": 0, "qz": 0,
            "timestamp_us": 17}]
    poses = geodesy.parse_poses(doc)
    recs = geodesy.geo_records(MapAnchor("m", GeoPoint(10, 20)), poses)
    assert recs[0]["frame_id"] == "a" and recs[0]["timestamp_us"] == 17 and recs[0]["alt"] == 0.2
    frames = geodesy.parse_geo_records(recs)
    assert frames[0].point.lat == recs[0]["lat"]


@pytest.mark.parametrize("doc", [{"frame_id": "a"}, [{"frame_id": "a", "x": 1}],
                                 [{"frame_id": "a", "x": 0, "y": 0, "z": 0, "qw": 2, "qx": 0, "qy": 0,
                                   "qz": 0, "timestamp_us": 0}]])
def test_parse_poses_rejects_bad_documents(doc):
    with pytest.raises(SchemaError):
        geodesy.parse_poses(doc)


def test_anchor_registry(tmp_path):
    default = geodesy.load_anchor_registry()
    assert "boston-seaport" in default
    path = tmp_path / "anchors.json"
    path.write_text(json.dumps({"site": {"lat": 1.0, "lon": 2.0}}))
    assert geodesy.load_anchor_registry(path)["site"].origin == GeoPoint(1.0, 2.0)
    path.write_text(json.dumps({"site": {"lat": "north"}}))
    with pytest.raises(SchemaError):
        geodesy.load_anchor_registry(path)
