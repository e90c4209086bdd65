import io
import json
import math
import threading

import numpy as np
import pytest
import requests
from PIL import Image

from georetrieval import reliability
from georetrieval.camera import Pose, heading_pitch_rotation, intrinsics_from_fov
from georetrieval.geodesy import GeoPoint, geodesic_direct, geodesic_inverse
from georetrieval.panorama import CacheCorruption, DEFAULT_HEADINGS, angles_from_direction, synthesize_view
from georetrieval.provider import (
    NONE_META,
    HttpProvider,
    MockPano,
    MockProvider,
    PanoMeta,
    PartialFetch,
    Scene,
    TileRequest,
    TokenBucket,
    TransportError,
    cache_key,
    cached_metadata,
    decode_direction,
    ensure_pano,
    fetch_tiles,
    misaligned_pano,
    render_view,
)

HERE = GeoPoint(1.2907, 103.8517)
SMALL = dict(width=512, height=256, size=96)


def small_pano(cache, meta, provider, **kw):
    return ensure_pano(cache, meta, provider, SMALL["width"], SMALL["height"], size=SMALL["size"], **kw)


def test_meta_and_request_validation():
    with pytest.raises(ValueError):
        PanoMeta("ok", None, HERE)
    with pytest.raises(ValueError):
        PanoMeta("none", "x", HERE)
    assert PanoMeta.from_dict(PanoMeta("ok", "x", HERE, "2019-01").to_dict()) == PanoMeta("ok", "x", HERE, "2019-01")
    with pytest.raises(ValueError):
        TileRequest(HERE, 0.0, fov=0.0)
    with pytest.raises(ValueError):
        TileRequest(HERE, 360.0)
    with pytest.raises(ValueError):
        TileRequest(None, 10.0)


def test_mock_metadata():
    prov = MockProvider([MockPano("here", HERE)])
    meta = prov.metadata(HERE)
    assert meta.ok and meta.pano_id == "here" and geodesic_inverse(meta.location, HERE) == 0.0
    assert MockProvider([]).metadata(HERE) == NONE_META
    assert prov.metadata(geodesic_direct(HERE, 0.0, 80.0)) == NONE_META


def test_mock_misaligned_pano_is_offset_from_query():
    truth = Scene("texture", 3)
    road = geodesic_direct(HERE, math.pi / 2, 12.0)
    prov = MockProvider([misaligned_pano("side", road, "parallel_road", truth)])
    meta = prov.metadata(HERE)
    assert meta.ok and geodesic_inverse(meta.location, HERE) == pytest.approx(12.0, abs=1e-6)
    with pytest.raises(ValueError):
        misaligned_pano("x", HERE, "sideways", truth)


def test_fetch_tiles_and_overlap():
    prov = MockProvider([MockPano("p", HERE)], dtype=np.float32)
    tiles = fetch_tiles(prov, prov.metadata(HERE), size=97)
    assert [t.heading for t in tiles] == list(DEFAULT_HEADINGS) and prov.tile_requests == 18
    assert all(t.pitch == 0.0 for t in tiles)
    a, b = tiles[0], tiles[1]
    overlap = math.degrees(a.intrinsics.hfov) - 20.0
    assert overlap == pytest.approx(40.0)
    theta, phi = angles_from_direction(decode_direction(a.pixels[48, 48]))
    assert float(theta) == pytest.approx(0.0, abs=1e-6) and float(phi) == pytest.approx(0.0, abs=1e-6)
    # a direction 30 deg east of north sits in both heading-0 and heading-20 tiles at the horizon
    shared = np.array([math.sin(math.radians(15)), 0.0, math.cos(math.radians(15))])
    for t in (a, b):
        local = shared @ np.asarray(Pose(t.rotation).R)
        assert local[2] > 0 and abs(local[0] / local[2]) < math.tan(math.radians(30))


def test_mock_is_deterministic():
    prov = MockProvider([MockPano("p", HERE, scene=Scene("texture", 5))])
    req = TileRequest(HERE, 40.0, size=64, pano_id="p")
    np.testing.assert_array_equal(prov.fetch_tile(req), prov.fetch_tile(req))


def test_fetch_tiles_partial_and_total_failure():
    prov = MockProvider([MockPano("p", HERE)], fail_headings=(20.0, 40.0))
    with pytest.raises(PartialFetch) as info:
        fetch_tiles(prov, prov.metadata(HERE), size=32)
    assert info.value.failed == (20.0, 40.0) and len(info.value.tiles) == 16
    with pytest.raises(TransportError):
        fetch_tiles(MockProvider([MockPano("p", HERE)], unreachable=True), PanoMeta("ok", "p", HERE), size=32)
    with pytest.raises(ValueError):
        fetch_tiles(prov, NONE_META)


def test_ensure_pano_is_idempotent(tmp_path):
    prov = MockProvider([MockPano("p", HERE)])
    meta = prov.metadata(HERE)
    first = small_pano(tmp_path, meta, prov)
    assert first.fetched and prov.tile_requests == 18
    data = first.pano.read_bytes(), first.mask.read_bytes(), first.meta.read_bytes()
    second = small_pano(tmp_path, meta, prov)
    assert not second.fetched and prov.tile_requests == 18
    assert (second.pano.read_bytes(), second.mask.read_bytes(), second.meta.read_bytes()) == data
    assert first.relative(tmp_path) == {"pano": "p/pano.png", "mask": "p/mask.png", "meta": "p/meta.json"}


def test_ensure_pano_detects_corruption_and_refetches(tmp_path):
    prov = MockProvider([MockPano("p", HERE)])
    meta = prov.metadata(HERE)
    files = small_pano(tmp_path, meta, prov)
    good = files.pano.read_bytes()
    files.pano.write_bytes(good[:-10])
    with pytest.raises(CacheCorruption):
        small_pano(tmp_path, meta, prov)
    again = small_pano(tmp_path, meta, prov, refetch=True)
    assert again.fetched and again.pano.read_bytes() == good and prov.tile_requests == 36


def test_ensure_pano_partial_option(tmp_path):
    prov = MockProvider([MockPano("p", HERE)], fail_headings=(180.0,))
    meta = prov.metadata(HERE)
    with pytest.raises(PartialFetch):
        small_pano(tmp_path, meta, prov)
    with pytest.warns(UserWarning):
        files = small_pano(tmp_path, meta, prov, allow_partial=True)
    assert json.loads(files.meta.read_text())["missing_headings"] == [180.0]


def test_keep_tiles(tmp_path):
    prov = MockProvider([MockPano("p", HERE)])
    files = small_pano(tmp_path, prov.metadata(HERE), prov, keep_tiles=True)
    assert len(list((files.directory / "tiles").glob("*.png"))) == 18


def test_concurrent_ensure_fetches_once(tmp_path):
    prov = MockProvider([MockPano("p", HERE)])
    meta = prov.metadata(HERE)
    results = []
    threads = [threading.Thread(target=lambda: results.append(small_pano(tmp_path, meta, prov))) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert prov.tile_requests == 18 and sum(r.fetched for r in results) == 1


def test_cache_key():
    assert cache_key("CAoSLEFGMVFpcE") == "CAoSLEFGMVFpcE"
    key = cache_key("../etc/passwd")
    assert key.startswith("h_") and "/" not in key


def test_cached_metadata(tmp_path):
    prov = MockProvider([MockPano("p", HERE)])
    a = cached_metadata(tmp_path, prov, HERE)
    b = cached_metadata(tmp_path, prov, HERE)
    assert a == b and prov.metadata_requests == 1
    assert cached_metadata(tmp_path, prov, GeoPoint(0, 0)) == NONE_META


def test_misaligned_modes_score_lower_than_aligned():
    truth = Scene("texture", 11)
    K = intrinsics_from_fov(math.radians(90), 96, 64)
    R = heading_pitch_rotation(math.radians(35), math.radians(-5))
    onboard = render_view(truth, K, R)
    aligned = reliability.gate_score(reliability.gate_features(onboard, render_view(truth, K, R), 1.0))
    for mode in ("indoor", "wrong_level", "parallel_road"):
        geo = render_view(misaligned_pano("m", HERE, mode, truth).scene, K, R)
        w = reliability.gate_score(reliability.gate_features(onboard, geo, 1.0))
        assert w < aligned - 0.3, mode


def test_stitched_cache_synthesizes_tile_view(tmp_path):
    prov = MockProvider([MockPano("p", HERE)])
    from georetrieval.panorama import load_panorama

    files = small_pano(tmp_path, prov.metadata(HERE), prov)
    pano = load_panorama(files.directory)
    K = intrinsics_from_fov(math.radians(60), 33, 33)
    img, valid = synthesize_view(pano, K, Pose(heading_pitch_rotation(math.radians(200))))
    theta, _ = angles_from_direction(decode_direction(img[16, 16]))
    assert valid[16, 16] and math.degrees(float(theta)) == pytest.approx(-160, abs=1.5)


# -- HTTP -------------------------------------------------------------------------------

class FakeResponse:
    def __init__(self, status=200, payload=None, content=b""):
        self.status_code = status
        self._payload = payload
        self.content = content

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.urls = []

    def get(self, url, timeout):
        self.urls.append(url)
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def http(session, **kw):
    sleeps = []
    prov = HttpProvider("https://meta.test/?loc={lat},{lon}&key={key}",
                        "https://img.test/?pano={pano_id}&h={heading}&p={pitch}&fov={fov}&s={size}&key={key}",
                        key="K", session=session, sleep=sleeps.append, **kw)
    return prov, sleeps


def test_http_metadata_ok_and_none():
    session = FakeSession([
        FakeResponse(payload={"status": "OK", "pano_id": "abc", "location": {"lat": 1.5, "lng": 2.5}, "date": "2020-05"}),
        FakeResponse(payload={"status": "ZERO_RESULTS"}),
    ])
    prov, _ = http(session)
    assert prov.metadata(HERE) == PanoMeta("ok", "abc", GeoPoint(1.5, 2.5), "2020-05")
    assert prov.metadata(HERE) == NONE_META
    assert session.urls[0] == f"https://meta.test/?loc={HERE.lat!r},{HERE.lon!r}&key=K"


def test_http_tile_fetch_fills_template():
    tile = np.full((8, 8, 3), 90, np.uint8)
    session = FakeSession([FakeResponse(content=png_bytes(tile))])
    prov, _ = http(session)
    out = prov.fetch_tile(TileRequest(HERE, 40.0, size=8, pano_id="abc"))
    np.testing.assert_array_equal(out, tile)
    assert session.urls[0] == "https://img.test/?pano=abc&h=40.0&p=0.0&fov=60.0&s=8&key=K"


def test_http_retries_with_backoff_then_gives_up():
    err = requests.ConnectionError("down")
    prov, sleeps = http(FakeSession([err, FakeResponse(503), err]))
    with pytest.raises(TransportError):
        prov.metadata(HERE)
    assert sleeps == [0.5, 1.0]


def test_http_recovers_after_transient_error():
    ok = FakeResponse(payload={"status": "OK", "pano_id": "z", "location": {"lat": 0, "lon": 0}})
    prov, sleeps = http(FakeSession([FakeResponse(502), ok]))
    assert prov.metadata(HERE).pano_id == "z" and sleeps == [0.5]


def test_http_client_error_is_not_retried():
    prov, sleeps = http(FakeSession([FakeResponse(403)]))
    with pytest.raises(TransportError):
        prov.metadata(HERE)
    assert sleeps == []


def test_http_unreachable_host():
    prov = HttpProvider("http://127.0.0.1:9/{lat}", "http://127.0.0.1:9/{heading}", timeout=0.5,
                        sleep=lambda s: None)
    with pytest.raises(TransportError):
        prov.metadata(HERE)


def test_http_from_env(monkeypatch):
    monkeypatch.delenv("GEORETRIEVAL_METADATA_URL", raising=False)
    with pytest.raises(TransportError):
        HttpProvider.from_env()
    monkeypatch.setenv("GEORETRIEVAL_METADATA_URL", "m")
    monkeypatch.setenv("GEORETRIEVAL_IMAGE_URL", "i")
    monkeypatch.setenv("GEORETRIEVAL_PROVIDER_KEY", "secret")
    prov = HttpProvider.from_env()
    assert (prov.metadata_url, prov.image_url, prov.key) == ("m", "i", "secret")


def test_token_bucket_limits_rate():
    now = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        now[0] += s

    bucket = TokenBucket(rate=10.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(30):
        bucket.acquire()
    # burst of 10, then one token every 0.1 s
    assert now[0] == pytest.approx(2.0)
