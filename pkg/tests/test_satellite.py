import math

import numpy as np
import pytest
from scipy import ndimage

from georetrieval.geodesy import GeoPoint, offset_to_geo
from georetrieval.satellite import (
    DEFAULT_CROP_SIZE,
    DEFAULT_GSD,
    FILL_VALUE,
    OutOfFootprint,
    SatMosaic,
    geo_to_pixel,
    ground_coords,
    load_mosaic,
    pixel_to_geo,
    pose_crop,
    save_mosaic,
)

ANCHOR = GeoPoint(1.2882, 103.7845)
SIZE = 1200


def marker_mosaic(center_xy, sigma=1.5):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] + 0.5
    blob = 255.0 * np.exp(-((xx - center_xy[0]) ** 2 + (yy - center_xy[1]) ** 2) / (2 * sigma**2))
    return SatMosaic(blob, ANCHOR)


def centroid(img):
    w = np.clip(img - 0.2 * img.max(), 0, None)
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]] + 0.5
    return (w * xx).sum() / w.sum(), (w * yy).sum() / w.sum()


def test_default_gsd_is_fifteen_centimeters():
    assert DEFAULT_GSD == 0.15
    assert SatMosaic(np.zeros((2, 2)), ANCHOR).gsd == 0.15
    assert DEFAULT_CROP_SIZE == 400


def test_geo_to_pixel_cases():
    m = SatMosaic(np.zeros((400, 400)), ANCHOR)
    assert geo_to_pixel(m, ANCHOR) == (0.0, 0.0)
    x, _ = geo_to_pixel(m, offset_to_geo(ANCHOR, 15.0, 0.0))
    assert x == pytest.approx(100.0, abs=1e-6)
    _, y = geo_to_pixel(m, offset_to_geo(ANCHOR, 15.0, -3.0))
    assert y == pytest.approx(20.0, abs=1e-6)
    with pytest.raises(OutOfFootprint):
        geo_to_pixel(m, offset_to_geo(ANCHOR, -1.0, 0.0))


def test_pixel_geo_round_trip():
    m = SatMosaic(np.zeros((4000, 4000)), ANCHOR)
    rng = np.random.default_rng(0)
    for x, y in rng.uniform(0, 4000, size=(200, 2)):
        x2, y2 = geo_to_pixel(m, pixel_to_geo(m, x, y))
        assert abs(x2 - x) < 1e-6 and abs(y2 - y) < 1e-6


@pytest.mark.parametrize("yaw_deg", [0, 45, 90, 135, 180, 225, 270, 315])
def test_marker_ahead_lands_right_of_center(yaw_deg):
    ego = pixel_to_geo(SatMosaic(np.zeros((1, 1)), ANCHOR), 600, 600)
    yaw = math.radians(yaw_deg)
    ahead = 10.0
    m = marker_mosaic((600 + ahead * math.cos(yaw) / DEFAULT_GSD, 600 - ahead * math.sin(yaw) / DEFAULT_GSD))
    crop = pose_crop(m, ego, yaw, 400)
    cx, cy = centroid(crop.pixels)
    assert cx == pytest.approx(200 + ahead / DEFAULT_GSD, abs=1.0)
    assert cy == pytest.approx(200, abs=1.0)
    assert not crop.padded


def test_north_facing_is_east_facing_rotated():
    rng = np.random.default_rng(1)
    img = ndimage.gaussian_filter(rng.uniform(0, 255, (SIZE, SIZE)), 3)
    m = SatMosaic(img, ANCHOR)
    ego = pixel_to_geo(m, 600, 600)
    east = pose_crop(m, ego, 0.0, 200).pixels
    north = pose_crop(m, ego, math.pi / 2, 200).pixels
    # facing north, the mosaic's north side shows on the right edge
    np.testing.assert_allclose(north, np.rot90(east, k=-1), atol=1e-6)
    back = pose_crop(m, ego, math.pi, 200).pixels
    np.testing.assert_allclose(back, np.rot90(east, k=2), atol=1e-6)


def test_crop_padding_and_out_of_footprint():
    m = SatMosaic(np.full((100, 100, 3), 10, np.uint8), ANCHOR)
    corner = pose_crop(m, ANCHOR, 0.0, 40)
    assert corner.pixels.dtype == np.uint8
    assert corner.padded_fraction == pytest.approx(0.75, abs=0.03)
    assert (corner.pixels[0, 0] == FILL_VALUE).all()
    with pytest.raises(OutOfFootprint):
        pose_crop(m, offset_to_geo(ANCHOR, -100.0, 100.0), 0.0, 40)


def test_ground_coords_single_plane():
    g = ground_coords(4, 0.5, (-1, -1, -1, 1, 1, 1))
    assert g.shape == (4, 4, 3)
    np.testing.assert_allclose(g[..., 2], 0.5)
    # columns grow forward, rows grow to the right (decreasing left)
    assert g[0, 3, 0] > g[0, 0, 0] and g[3, 0, 1] < g[0, 0, 1]


def test_mosaic_io(tmp_path):
    m = SatMosaic(np.arange(48, dtype=np.uint8).reshape(4, 4, 3), ANCHOR, 0.3)
    save_mosaic(m, tmp_path / "sat.png")
    back = load_mosaic(tmp_path / "sat.png")
    np.testing.assert_array_equal(back.pixels, m.pixels)
    assert back.anchor == ANCHOR and back.gsd == 0.3
