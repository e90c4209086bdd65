"""Street-view sources and the on-disk panorama cache.

A provider answers two kinds of calls: a metadata lookup (nearest panorama
to a location, or none) and a perspective tile render at a heading, pitch and
field of view. :class:`MockProvider` renders analytic scenes for testing;
:class:`HttpProvider` is a URL-template client for a real service.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import requests
from filelock import FileLock
from PIL import Image

from georetrieval import raster, rotations
from georetrieval.camera import Intrinsics, heading_pitch_rotation, intrinsics_from_fov, pixel_to_ray
from georetrieval.geodesy import GeoPoint, geodesic_inverse
from georetrieval.panorama import (
    DEFAULT_HEADINGS,
    DEFAULT_HEIGHT,
    DEFAULT_WIDTH,
    CacheCorruption,
    PerspectiveTile,
    save_panorama,
    stitch,
    verify_panorama,
)

log = logging.getLogger(__name__)

DEFAULT_FOV = 60.0
DEFAULT_TILE_SIZE = 640

ENV_KEY = "GEORETRIEVAL_PROVIDER_KEY"
ENV_METADATA_URL = "GEORETRIEVAL_METADATA_URL"
ENV_IMAGE_URL = "GEORETRIEVAL_IMAGE_URL"


class TransportError(RuntimeError):
    """The provider could not be reached or answered with an error."""


class PartialFetch(TransportError):
    """Some tiles of a panorama failed to download."""

    def __init__(self, failed: Sequence[float], tiles: Sequence[PerspectiveTile]):
        super().__init__(f"failed headings: {list(failed)}")
        self.failed = tuple(failed)
        self.tiles = list(tiles)


@dataclass(frozen=True)
class PanoMeta:
    status: str
    pano_id: Optional[str] = None
    location: Optional[GeoPoint] = None
    capture_date: Optional[str] = None

    def __post_init__(self) -> None:
        if self.status not in ("ok", "none"):
            raise ValueError(f"unknown status {self.status!r}")
        has = self.pano_id is not None and self.location is not None
        if has != (self.status == "ok"):
            raise ValueError("pano_id and location are required exactly when status is ok")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = {"status": self.status, "pano_id": self.pano_id, "capture_date": self.capture_date}
        d["location"] = None if self.location is None else {"lat": self.location.lat, "lon": self.location.lon}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PanoMeta":
        loc = d.get("location")
        return cls(d["status"], d.get("pano_id"),
                   None if loc is None else GeoPoint(loc["lat"], loc["lon"]), d.get("capture_date"))


NONE_META = PanoMeta("none")


@dataclass(frozen=True)
class TileRequest:
    location: Optional[GeoPoint]
    heading: float
    pitch: float = 0.0
    fov: float = DEFAULT_FOV
    size: int = DEFAULT_TILE_SIZE
    pano_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.location is None and self.pano_id is None:
            raise ValueError("tile request needs a location or a pano_id")
        if not 0.0 < self.fov <= 120.0:
            raise ValueError("fov must be in (0, 120]")
        if not 0.0 <= self.heading < 360.0:
            raise ValueError("heading must be in [0, 360)")

    @property
    def intrinsics(self) -> Intrinsics:
        return intrinsics_from_fov(math.radians(self.fov), self.size, self.size)


# -- analytic scenes ------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    """Analytic environment map of a mock panorama.

    ``direction`` scenes encode the unit ray in panorama coordinates, R/G/B =
    127.5 * (1 + east/up/north), which :func:`decode_direction` inverts.
    ``texture`` scenes are a smooth random pattern seeded by ``seed``.
    ``yaw_offset`` (degrees) and ``flip_vertical`` distort the scene relative
    to the true surroundings and model misaligned retrievals.
    """

    kind: str = "direction"
    seed: int = 0
    yaw_offset: float = 0.0
    flip_vertical: bool = False


def _texture_waves(seed: int, n: int = 12):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(3, n, 3))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    k *= rng.uniform(8.0, 40.0, size=(3, n, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(3, n))
    return k, phase


def render_scene(scene: Scene, dirs: np.ndarray) -> np.ndarray:
    """Colors (0-255 float64, 3 channels) of panorama-frame unit directions."""
    d = np.asarray(dirs, dtype=float)
    if scene.yaw_offset:
        R = rotations.to_matrix(heading_pitch_rotation(-math.radians(scene.yaw_offset)))
        d = d @ R
    if scene.flip_vertical:
        d = d * np.array([1.0, -1.0, 1.0])
    if scene.kind == "direction":
        enc = np.stack([d[..., 0], -d[..., 1], d[..., 2]], axis=-1)
        return 127.5 * (1.0 + enc)
    if scene.kind == "texture":
        k, phase = _texture_waves(scene.seed)
        out = np.empty(d.shape[:-1] + (3,))
        for c in range(3):
            arg = np.tensordot(d, k[c].T, axes=([-1], [0])) + phase[c]
            out[..., c] = 127.5 + 60.0 * np.sum(np.cos(arg), axis=-1) / math.sqrt(k.shape[1] / 2.0)
        return np.clip(out, 0.0, 255.0)
    raise ValueError(f"unknown scene kind {scene.kind!r}")


def decode_direction(colors: np.ndarray) -> np.ndarray:
    """Inverse of the ``direction`` scene encoding; returns panorama-frame unit vectors."""
    enc = np.asarray(colors, dtype=float) / 127.5 - 1.0
    d = np.stack([enc[..., 0], -enc[..., 1], enc[..., 2]], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def render_view(scene: Scene, K: Intrinsics, rotation: Sequence[float], dtype=np.float64) -> np.ndarray:
    """Pinhole rendering of a scene; ``rotation`` maps camera rays to the panorama frame."""
    u = np.arange(K.width, dtype=float) + 0.5
    v = np.arange(K.height, dtype=float) + 0.5
    uu, vv = np.meshgrid(u, v)
    rays = pixel_to_ray(K, uu, vv) @ rotations.to_matrix(rotation).T
    colors = render_scene(scene, rays)
    return raster.to_uint8(colors) if dtype == np.uint8 else colors.astype(dtype)


# -- providers ------------------------------------------------------------------------

class Provider:
    """Interface shared by the mock and the HTTP client."""

    tile_requests: int = 0
    metadata_requests: int = 0

    def metadata(self, query: GeoPoint) -> PanoMeta:
        raise NotImplementedError

    def fetch_tile(self, request: TileRequest) -> np.ndarray:
        raise NotImplementedError


MISALIGNED_MODES = ("indoor", "wrong_level", "parallel_road")


@dataclass
class MockPano:
    pano_id: str
    location: GeoPoint
    capture_date: Optional[str] = "2019-06"
    scene: Scene = field(default_factory=Scene)
    mode: str = "aligned"


def misaligned_pano(pano_id: str, location: GeoPoint, mode: str, truth: Scene) -> MockPano:
    """A panorama that looks wrong relative to ``truth`` in one of the three misaligned modes.

    ``indoor`` shows an unrelated scene, ``wrong_level`` mirrors it vertically
    (bridge versus ground), ``parallel_road`` turns it as if seen from an
    adjacent roadway.
    """
    if mode == "indoor":
        scene = Scene("texture", seed=truth.seed + 7919)
    elif mode == "wrong_level":
        scene = Scene(truth.kind, truth.seed, truth.yaw_offset, not truth.flip_vertical)
    elif mode == "parallel_road":
        scene = Scene(truth.kind, truth.seed, truth.yaw_offset + 90.0, truth.flip_vertical)
    else:
        raise ValueError(f"unknown misaligned mode {mode!r}")
    return MockPano(pano_id, location, scene=scene, mode=mode)


class MockProvider(Provider):
    """In-memory world of panoramas with analytic content.

    ``metadata`` returns the nearest panorama within ``search_radius`` meters.
    Tiles are rendered exactly through the camera model; ``dtype=np.uint8``
    mimics a real download, a float dtype keeps the analytic values.
    """

    def __init__(self, panos: Sequence[MockPano] = (), search_radius: float = 50.0,
                 dtype=np.uint8, fail_headings: Sequence[float] = (), unreachable: bool = False):
        self.panos = {p.pano_id: p for p in panos}
        self.search_radius = search_radius
        self.dtype = dtype
        self.fail_headings = set(fail_headings)
        self.unreachable = unreachable
        self.tile_requests = 0
        self.metadata_requests = 0
        self._lock = threading.Lock()

    def metadata(self, query: GeoPoint) -> PanoMeta:
        with self._lock:
            self.metadata_requests += 1
        if self.unreachable:
            raise TransportError("mock provider marked unreachable")
        best = None
        for p in self.panos.values():
            d = geodesic_inverse(query, p.location)
            if d <= self.search_radius and (best is None or (d, p.pano_id) < best[0]):
                best = ((d, p.pano_id), p)
        if best is None:
            return NONE_META
        p = best[1]
        return PanoMeta("ok", p.pano_id, p.location, p.capture_date)

    def _resolve(self, request: TileRequest) -> MockPano:
        if request.pano_id is not None:
            try:
                return self.panos[request.pano_id]
            except KeyError:
                raise TransportError(f"unknown pano {request.pano_id!r}") from None
        meta = self.metadata(request.location)
        if not meta.ok:
            raise TransportError("no panorama at requested location")
        return self.panos[meta.pano_id]

    def fetch_tile(self, request: TileRequest) -> np.ndarray:
        with self._lock:
            self.tile_requests += 1
        if self.unreachable or request.heading in self.fail_headings:
            raise TransportError(f"mock failure at heading {request.heading}")
        pano = self._resolve(request)
        rot = heading_pitch_rotation(math.radians(request.heading), math.radians(request.pitch))
        return render_view(pano.scene, request.intrinsics, rot, dtype=self.dtype)


def load_mock_world(path) -> List[MockPano]:
    """Read a JSON list of ``{pano_id, lat, lon, capture_date?, scene?, mode?}``."""
    doc = json.loads(Path(path).read_text())
    panos = []
    for rec in doc:
        s = rec.get("scene", {})
        panos.append(MockPano(
            rec["pano_id"], GeoPoint(rec["lat"], rec["lon"]), rec.get("capture_date", "2019-06"),
            Scene(s.get("kind", "direction"), s.get("seed", 0), s.get("yaw_offset", 0.0),
                  s.get("flip_vertical", False)),
            rec.get("mode", "aligned"),
        ))
    return panos


class TokenBucket:
    """Blocking token-bucket rate limiter, safe to share across threads."""

    def __init__(self, rate: float = 10.0, capacity: Optional[float] = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                # tolerance: refill arithmetic can land a hair below one token
                if self._tokens >= 1.0 - 1e-9:
                    self._tokens = max(0.0, self._tokens - 1.0)
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class HttpProvider(Provider):
    """Generic URL-template street-view client.

    Templates may use ``{lat} {lon} {pano_id} {heading} {pitch} {fov} {size} {key}``.
    Metadata responses are JSON with ``status``, ``pano_id``, ``location``
    (``lat`` and ``lng`` or ``lon``) and optionally ``date``. Transport errors
    are retried ``retries`` times with exponential backoff from ``backoff`` s.
    """

    NONE_STATUSES = {"ZERO_RESULTS", "NOT_FOUND", "NONE"}

    def __init__(self, metadata_url: str, image_url: str, key: str = "", rate: float = 10.0,
                 retries: int = 3, backoff: float = 0.5, timeout: float = 10.0,
                 session: Optional[requests.Session] = None, sleep: Callable[[float], None] = time.sleep):
        self.metadata_url = metadata_url
        self.image_url = image_url
        self.key = key
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self.bucket = TokenBucket(rate, sleep=sleep)
        self._sleep = sleep
        self.tile_requests = 0
        self.metadata_requests = 0
        self._lock = threading.Lock()

    @classmethod
    def from_env(cls, **kw) -> "HttpProvider":
        try:
            meta_url = os.environ[ENV_METADATA_URL]
            image_url = os.environ[ENV_IMAGE_URL]
        except KeyError as exc:
            raise TransportError(f"environment variable {exc.args[0]} is not set") from None
        return cls(meta_url, image_url, os.environ.get(ENV_KEY, ""), **kw)

    def _get(self, url: str) -> requests.Response:
        last: Optional[Exception] = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.bucket.acquire()
            try:
                resp = self.session.get(url, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code} from {url}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code} from {url}")
            return resp
        raise TransportError(f"giving up on {url} after {self.retries} attempts: {last}")

    def _fill(self, template: str, **values) -> str:
        values.setdefault("pano_id", "")
        values.setdefault("lat", "")
        values.setdefault("lon", "")
        return template.format(key=self.key, **values)

    def metadata(self, query: GeoPoint) -> PanoMeta:
        with self._lock:
            self.metadata_requests += 1
        resp = self._get(self._fill(self.metadata_url, lat=repr(query.lat), lon=repr(query.lon)))
        try:
            doc = resp.json()
        except ValueError as exc:
            raise TransportError(f"metadata response is not JSON: {exc}") from exc
        status = str(doc.get("status", "")).upper()
        if status in self.NONE_STATUSES:
            return NONE_META
        if status != "OK":
            raise TransportError(f"metadata status {status!r}")
        loc = doc["location"]
        lon = loc.get("lng", loc.get("lon"))
        return PanoMeta("ok", str(doc["pano_id"]), GeoPoint(loc["lat"], lon), doc.get("date"))

    def fetch_tile(self, request: TileRequest) -> np.ndarray:
        with self._lock:
            self.tile_requests += 1
        loc = request.location
        url = self._fill(
            self.image_url,
            lat=repr(loc.lat) if loc else "", lon=repr(loc.lon) if loc else "",
            pano_id=request.pano_id or "", heading=request.heading, pitch=request.pitch,
            fov=request.fov, size=request.size,
        )
        resp = self._get(url)
        try:
            with Image.open(io.BytesIO(resp.content)) as im:
                return np.asarray(im.convert("RGB")).copy()
        except OSError as exc:
            raise TransportError(f"undecodable image from {url}: {exc}") from exc


# -- fetching and caching ---------------------------------------------------------------

def fetch_tiles(provider: Provider, meta: PanoMeta, headings: Sequence[float] = DEFAULT_HEADINGS,
                fov: float = DEFAULT_FOV, size: int = DEFAULT_TILE_SIZE) -> List[PerspectiveTile]:
    """One pitch-0 tile per heading at the panorama's capture point.

    Raises :class:`PartialFetch` if some headings failed and :class:`TransportError`
    if all did.
    """
    if not meta.ok:
        raise ValueError("cannot fetch tiles for a missing panorama")
    tiles, failed = [], []
    last_error: Optional[Exception] = None
    for h in headings:
        req = TileRequest(meta.location, float(h), 0.0, fov, size, meta.pano_id)
        try:
            pixels = provider.fetch_tile(req)
        except TransportError as exc:
            failed.append(float(h))
            last_error = exc
            continue
        tiles.append(PerspectiveTile(pixels, req.intrinsics, float(h), 0.0))
    if failed and not tiles:
        raise TransportError(f"all tiles failed for {meta.pano_id}: {last_error}")
    if failed:
        raise PartialFetch(failed, tiles)
    return tiles


_SAFE = re.compile(r"^[A-Za-z0-9_.-]{1,128}$")


def cache_key(pano_id: str) -> str:
    """Filesystem-safe directory name for a panorama id."""
    if _SAFE.match(pano_id) and pano_id not in (".", ".."):
        return pano_id
    return "h_" + hashlib.sha1(pano_id.encode()).hexdigest()


@dataclass(frozen=True)
class PanoFiles:
    pano_id: str
    directory: Path
    fetched: bool

    @property
    def pano(self) -> Path:
        return self.directory / "pano.png"

    @property
    def mask(self) -> Path:
        return self.directory / "mask.png"

    @property
    def meta(self) -> Path:
        return self.directory / "meta.json"

    def relative(self, root) -> Dict[str, str]:
        root = Path(root)
        return {k: getattr(self, k).relative_to(root).as_posix() for k in ("pano", "mask", "meta")}


def ensure_pano(
    cache_dir,
    meta: PanoMeta,
    provider: Provider,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    fov: float = DEFAULT_FOV,
    size: int = DEFAULT_TILE_SIZE,
    headings: Sequence[float] = DEFAULT_HEADINGS,
    keep_tiles: bool = False,
    refetch: bool = False,
    allow_partial: bool = False,
) -> PanoFiles:
    """Make sure the panorama is in the cache, downloading and stitching it at most once.

    A cache hit issues no provider requests. A cached entry whose checksum no
    longer matches raises :class:`CacheCorruption` unless ``refetch`` is set.
    With ``allow_partial`` a :class:`PartialFetch` is stitched from the tiles
    that arrived, leaving the missing headings unmasked.
    """
    if not meta.ok:
        raise ValueError("cannot cache a missing panorama")
    root = Path(cache_dir)
    directory = root / cache_key(meta.pano_id)
    locks = root / ".locks"
    locks.mkdir(parents=True, exist_ok=True)
    with FileLock(str(locks / f"{cache_key(meta.pano_id)}.lock")):
        if (directory / "meta.json").exists():
            try:
                verify_panorama(directory)
                return PanoFiles(meta.pano_id, directory, fetched=False)
            except CacheCorruption:
                if not refetch:
                    raise
                log.warning("refetching corrupted panorama %s", meta.pano_id)
        try:
            tiles = fetch_tiles(provider, meta, headings, fov, size)
        except PartialFetch as exc:
            if not allow_partial:
                raise
            log.warning("panorama %s missing headings %s", meta.pano_id, exc.failed)
            tiles = list(exc.tiles)
        pano = stitch(tiles, width, height, meta.location, meta.pano_id, headings, meta.capture_date)
        save_panorama(pano, directory)
        if keep_tiles:
            tdir = directory / "tiles"
            tdir.mkdir(exist_ok=True)
            for t in tiles:
                raster.save_png(tdir / f"{t.heading:g}.png", t.pixels)
    return PanoFiles(meta.pano_id, directory, fetched=True)


def cached_metadata(cache_dir, provider: Provider, query: GeoPoint) -> PanoMeta:
    """Metadata lookup memoized on disk by query coordinate (rounded to 1e-7 deg)."""
    key = f"{query.lat:.7f},{query.lon:.7f}"
    d = Path(cache_dir) / "metadata"
    f = d / (hashlib.sha1(key.encode()).hexdigest() + ".json")
    if f.exists():
        return PanoMeta.from_dict(json.loads(f.read_text()))
    meta = provider.metadata(query)
    d.mkdir(parents=True, exist_ok=True)
    doc = meta.to_dict()
    doc["query"] = key
    tmp = f.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True) + "\n")
    tmp.replace(f)
    return meta
