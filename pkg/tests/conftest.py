import json
import math

import pytest

from georetrieval.geodesy import GeoPoint, geodesic_direct

BOSTON = GeoPoint(42.336849169438615, -71.05785369873047)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


def pytest_runtest_logreport(report):
    item_marker = getattr(report, "criterion", None)
    if item_marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        results = report.config_criteria
        results[item_marker] = results.get(item_marker, True) and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])
        report.config_criteria = item.config._criteria


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), ok in sorted(results.items()):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")


def line_of_points(origin: GeoPoint, bearing_deg: float, spacing: float, n: int):
    return [geodesic_direct(origin, math.radians(bearing_deg), spacing * i) for i in range(n)]


@pytest.fixture
def dedup_world(tmp_path):
    """Three panoramas 40 m apart along an east-west street, ten frames near them."""
    panos = line_of_points(BOSTON, 90.0, 40.0, 3)
    world = [{"pano_id": f"pano{i}", "lat": p.lat, "lon": p.lon} for i, p in enumerate(panos)]
    frames = []
    for i, count in enumerate((4, 3, 3)):
        for j, p in enumerate(line_of_points(panos[i], 0.0, 2.0, count)):
            frames.append({"frame_id": f"f{len(frames):02d}", "lat": p.lat, "lon": p.lon,
                           "qw": 1.0, "qx": 0.0, "qy": 0.0, "qz": 0.0})
    world_path = tmp_path / "world.json"
    geo_path = tmp_path / "geo.json"
    world_path.write_text(json.dumps(world))
    geo_path.write_text(json.dumps(frames))
    return world_path, geo_path
