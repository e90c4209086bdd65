"""``georetrieval`` command line.

Exit codes: 0 success, 2 invalid input or schema error, 3 provider failure,
4 nothing retrieved for the request.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from georetrieval import camera, geodesy, panorama, provider, raster, reliability, retrieval, satellite

log = logging.getLogger("georetrieval")

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_PROVIDER = 3
EXIT_NO_RETRIEVAL = 4

ENV_PREFIX = "GEORETRIEVAL_"


class UsageError(Exception):
    """Bad input; maps to exit code 2."""


class NoRetrieval(Exception):
    """Nothing to return for the request; maps to exit code 4."""


@dataclass(frozen=True)
class PipelineConfig:
    cache_dir: Path = Path("cache")
    threshold: float = retrieval.DEFAULT_THRESHOLD
    pano_width: int = panorama.DEFAULT_WIDTH
    pano_height: int = panorama.DEFAULT_HEIGHT
    tile_fov: float = provider.DEFAULT_FOV
    tile_size: int = provider.DEFAULT_TILE_SIZE
    gate_params: Optional[Path] = None
    provider: str = "mock"
    mock_world: Optional[Path] = None
    anchors: Optional[Path] = None
    jobs: int = os.cpu_count() or 1
    rate: float = 10.0

    def __post_init__(self) -> None:
        for name in ("threshold", "pano_width", "pano_height", "tile_fov", "tile_size", "jobs", "rate"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.provider not in ("mock", "http"):
            raise UsageError(f"provider must be mock or http, got {self.provider!r}")
        for name in ("gate_params", "mock_world", "anchors"):
            path = getattr(self, name)
            if path is not None and not path.exists():
                raise UsageError(f"{name} file not found: {path}")


_CONFIG_TYPES = {
    "cache_dir": Path, "threshold": float, "pano_width": int, "pano_height": int,
    "tile_fov": float, "tile_size": int, "gate_params": Path, "provider": str,
    "mock_world": Path, "anchors": Path, "jobs": int, "rate": float,
}


def resolve_config(args: argparse.Namespace, environ=os.environ) -> PipelineConfig:
    """Flags override environment variables, which override the JSON config file."""
    values: Dict[str, Any] = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(doc) - set(_CONFIG_TYPES)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for key in _CONFIG_TYPES:
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            values[key] = env
    for key in _CONFIG_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        typed = {k: _CONFIG_TYPES[k](v) for k, v in values.items()}
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config value: {exc}") from exc
    return PipelineConfig(**typed)


def _out(args, payload: dict, text: Optional[str] = None) -> None:
    if args.json:
        print(json.dumps(_jsonable(payload), sort_keys=True))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in sorted(payload.items())))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _make_provider(cfg: PipelineConfig) -> provider.Provider:
    if cfg.provider == "http":
        try:
            return provider.HttpProvider.from_env(rate=cfg.rate)
        except provider.TransportError as exc:
            raise UsageError(str(exc)) from exc
    world = provider.load_mock_world(cfg.mock_world) if cfg.mock_world else []
    return provider.MockProvider(world)


def _gate_params(cfg: PipelineConfig) -> reliability.GateParams:
    return reliability.GateParams.load(cfg.gate_params) if cfg.gate_params else reliability.GateParams()


# -- commands ---------------------------------------------------------------------------

def cmd_poses_to_geo(args, cfg: PipelineConfig) -> int:
    registry = geodesy.load_anchor_registry(cfg.anchors)
    if args.anchor not in registry:
        raise UsageError(f"unknown anchor {args.anchor!r}; known: {sorted(registry)}")
    poses = geodesy.parse_poses(_read_json(args.poses))
    records = geodesy.geo_records(registry[args.anchor], poses)
    text = json.dumps(records, indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        _out(args, {"records": len(records), "output": str(args.output)})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_curate(args, cfg: PipelineConfig) -> int:
    frames = geodesy.parse_geo_records(_read_json(args.geo))
    src = _make_provider(cfg)
    manifest_path = Path(args.manifest)
    manifest_dir = manifest_path.resolve().parent

    metas: Dict[str, provider.PanoMeta] = {}
    for f in frames:
        meta = provider.cached_metadata(cfg.cache_dir, src, f.point)
        if not meta.ok or meta.pano_id in metas:
            continue
        if geodesy.geodesic_inverse(f.point, meta.location) <= cfg.threshold:
            metas[meta.pano_id] = meta

    def fetch(meta: provider.PanoMeta) -> provider.PanoFiles:
        return provider.ensure_pano(
            cfg.cache_dir, meta, src, cfg.pano_width, cfg.pano_height, cfg.tile_fov, cfg.tile_size,
            keep_tiles=args.keep_tiles, refetch=args.refetch, allow_partial=args.allow_partial,
        )

    ordered = [metas[k] for k in sorted(metas)]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        files = list(pool.map(fetch, ordered))

    index = retrieval.build_index((m.pano_id, m.location) for m in ordered)
    fresh = retrieval.assign_frames(index, ((f.frame_id, f.point) for f in frames), cfg.threshold)
    for pf in files:
        if pf.pano_id in fresh.panos:
            fresh.panos[pf.pano_id].files = {
                k: Path(os.path.relpath(Path(v).resolve(), manifest_dir)).as_posix()
                for k, v in (("pano", pf.pano), ("mask", pf.mask), ("meta", pf.meta))
            }
    manifest = retrieval.Manifest.load(manifest_path).merge(fresh) if manifest_path.exists() else fresh
    manifest.save(manifest_path)
    hits = sum(e.pano_id is not None for e in fresh.frames.values())
    _out(args, {
        "frames": len(fresh.frames), "hits": hits, "none": len(fresh.frames) - hits,
        "panos": len(fresh.panos), "fetched": sum(pf.fetched for pf in files),
        "manifest": str(manifest_path),
    })
    return EXIT_OK


def cmd_retrieve(args, cfg: PipelineConfig) -> int:
    manifest = retrieval.Manifest.load(args.manifest)
    index = retrieval.build_index((pid, rec.location) for pid, rec in sorted(manifest.panos.items()))
    if args.query:
        frames = geodesy.parse_geo_records(_read_json(args.query))
        results = [index.nearest(f.point, cfg.threshold, f.frame_id) for f in frames]
        rows = [{"frame_id": r.query_frame, "pano_id": r.pano_id, "distance_m": r.distance} for r in results]
        if args.json:
            _out(args, {"results": rows})
        else:
            for r in results:
                print(f"{r.query_frame}\t{r.pano_id}\t{r.distance:.3f}" if r.hit else f"{r.query_frame}\tNONE")
        return EXIT_OK
    if args.lat is None or args.lon is None:
        raise UsageError("retrieve needs a query file or --lat and --lon")
    res = index.nearest(geodesy.GeoPoint(args.lat, args.lon), cfg.threshold)
    _out(args, {"pano_id": res.pano_id, "distance_m": res.distance},
         f"{res.pano_id}\t{res.distance:.3f}" if res.hit else "NONE")
    return EXIT_OK if res.hit else EXIT_NO_RETRIEVAL


def cmd_render(args, cfg: PipelineConfig) -> int:
    manifest_path = Path(args.manifest)
    manifest = retrieval.Manifest.load(manifest_path)
    entry = manifest.frames.get(args.frame_id)
    if entry is None:
        raise UsageError(f"frame {args.frame_id!r} not in manifest")
    if entry.pano_id is None:
        raise NoRetrieval(f"frame {args.frame_id} has no panorama within the threshold")
    frames = {f.frame_id: f for f in geodesy.parse_geo_records(_read_json(args.geo))}
    if args.frame_id not in frames:
        raise UsageError(f"frame {args.frame_id!r} not in {args.geo}")
    frame = frames[args.frame_id]
    rec = manifest.panos[entry.pano_id]
    pano_dir = (manifest_path.resolve().parent / rec.files["pano"]).parent if "pano" in rec.files \
        else cfg.cache_dir / provider.cache_key(entry.pano_id)
    pano = panorama.load_panorama(pano_dir)
    K, cam = camera.parse_calibration(_read_json(args.calibration))
    ego = geodesy.LocalPose(0.0, 0.0, 0.0, frame.rotation)
    pose = camera.virtual_camera_for_frame(frame.point, pano.capture, ego, cam.rotation)
    image, valid = panorama.synthesize_view(pano, K, pose, workers=cfg.jobs)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    view_path, valid_path = out / f"{args.frame_id}_view.png", out / f"{args.frame_id}_valid.png"
    raster.save_png(view_path, raster.to_uint8(image))
    raster.save_mask(valid_path, valid)
    _out(args, {"view": str(view_path), "valid": str(valid_path), "pano_id": entry.pano_id,
                "valid_fraction": float(valid.mean())})
    return EXIT_OK


def cmd_crop_sat(args, cfg: PipelineConfig) -> int:
    mosaic = satellite.load_mosaic(args.mosaic, args.sidecar)
    try:
        crop = satellite.pose_crop(mosaic, geodesy.GeoPoint(args.lat, args.lon), math.radians(args.yaw), args.size)
    except satellite.OutOfFootprint as exc:
        raise NoRetrieval(str(exc)) from exc
    raster.save_png(args.output, crop.pixels)
    _out(args, {"output": str(args.output), "padded_fraction": crop.padded_fraction, "gsd": mosaic.gsd})
    return EXIT_OK


def cmd_score(args, cfg: PipelineConfig) -> int:
    params = _gate_params(cfg)
    valid = raster.load_mask(args.valid) if args.valid else None
    feats = reliability.gate_features(raster.load_png(args.onboard), raster.load_png(args.geo_image),
                                      args.distance, params, valid, args.kernel)
    w = reliability.gate_score(feats, params)
    _out(args, {"w": w, "diff_mean": feats.diff_mean, "dist_feat": feats.dist_feat}, f"{w:.6f}")
    return EXIT_OK


def cmd_calibrate(args, cfg: PipelineConfig) -> int:
    samples = reliability.read_feature_csv(args.features or reliability.SYNTHETIC_CSV)
    feats = [s.features for s in samples]
    labels = [s.label for s in samples]
    result = reliability.calibrate_with_history(feats, labels, args.epochs, args.lr, args.seed)
    params = result.params
    params.save(args.output)
    scores = [reliability.gate_score(f, params) for f in feats]
    _out(args, {"output": str(args.output), "bce": result.losses[-1],
                "auc": reliability.roc_auc(scores, labels), **params.to_dict()})
    return EXIT_OK


def cmd_storage_report(args, cfg: PipelineConfig) -> int:
    manifest = retrieval.Manifest.load(args.manifest) if args.manifest else None
    frames = args.frames if args.frames is not None else (len(manifest.frames) if manifest else None)
    if frames is None or (manifest is None and args.panos is None):
        raise UsageError("storage-report needs --manifest or both --frames and --panos")
    report = retrieval.storage_report(manifest, frames, args.cameras, args.tile_bytes, args.crop_bytes,
                                      pano_count=args.panos)
    _out(args, report.to_dict())
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file (lowest precedence)")
    p.add_argument("--json", action="store_true", help="machine-readable output with sorted keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--threshold", type=float, help="retrieval distance threshold in meters")
    p.add_argument("--pano-width", dest="pano_width", type=int)
    p.add_argument("--pano-height", dest="pano_height", type=int)
    p.add_argument("--tile-fov", dest="tile_fov", type=float)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--gate-params", dest="gate_params")
    p.add_argument("--provider", choices=("mock", "http"))
    p.add_argument("--mock-world", dest="mock_world", help="JSON list of mock panoramas")
    p.add_argument("--anchors", help="anchor registry JSON")
    p.add_argument("--jobs", type=int)
    p.add_argument("--rate", type=float, help="provider requests per second")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="georetrieval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poses-to-geo", parents=[common], help="georeference local poses")
    p.add_argument("poses")
    p.add_argument("--anchor", required=True, help="location name in the anchor registry")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_poses_to_geo)

    p = sub.add_parser("curate", parents=[common], help="fetch, stitch and map frames to panoramas")
    p.add_argument("geo")
    p.add_argument("--manifest", default="manifest.json")
    p.add_argument("--keep-tiles", action="store_true")
    p.add_argument("--refetch", action="store_true", help="replace corrupted cache entries")
    p.add_argument("--allow-partial", action="store_true", help="stitch panoramas with missing tiles")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("retrieve", parents=[common], help="nearest manifest panorama to a location")
    p.add_argument("query", nargs="?", help="georeferenced frame records to look up")
    p.add_argument("--manifest", default="manifest.json")
    p.add_argument("--lat", type=float)
    p.add_argument("--lon", type=float)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("render", parents=[common], help="synthesize the aligned street view of a frame")
    p.add_argument("manifest")
    p.add_argument("frame_id")
    p.add_argument("calibration")
    p.add_argument("--geo", required=True, help="georeferenced frame records")
    p.add_argument("-o", "--output-dir", default=".")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("crop-sat", parents=[common], help="pose-aligned satellite crop")
    p.add_argument("mosaic")
    p.add_argument("--sidecar")
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--yaw", type=float, default=0.0, help="degrees counter-clockwise from east")
    p.add_argument("--size", type=int, default=satellite.DEFAULT_CROP_SIZE)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_crop_sat)

    p = sub.add_parser("score", parents=[common], help="reliability of a retrieved image")
    p.add_argument("onboard")
    p.add_argument("geo_image")
    p.add_argument("--distance", type=float, required=True, help="GPS distance in meters")
    p.add_argument("--valid", help="validity mask PNG of the geographic image")
    p.add_argument("--kernel", type=int, default=reliability.DEFAULT_KERNEL)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", parents=[common], help="fit gate parameters to labels")
    p.add_argument("features", nargs="?", help="feature CSV (default: shipped synthetic set)")
    p.add_argument("-o", "--output", default="gate_params.json")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("storage-report", parents=[common], help="dedup versus per-frame storage")
    p.add_argument("--manifest")
    p.add_argument("--frames", type=int)
    p.add_argument("--panos", type=int)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--tile-bytes", type=int, default=provider.DEFAULT_TILE_SIZE ** 2)
    p.add_argument("--crop-bytes", type=int, default=1600 * 900)
    p.set_defaults(func=cmd_storage_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except NoRetrieval as exc:
        print(f"georetrieval: {exc}", file=sys.stderr)
        return EXIT_NO_RETRIEVAL
    except (provider.TransportError, panorama.CacheCorruption) as exc:
        print(f"georetrieval: provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (UsageError, geodesy.SchemaError, retrieval.ManifestError, reliability.SingleClass,
            reliability.SizeMismatch, KeyError, ValueError, OSError) as exc:
        print(f"georetrieval: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
