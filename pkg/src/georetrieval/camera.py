"""Pinhole camera model, virtual-camera poses and depth-frustum coordinates.

Conventions:

* camera frame: +Z optical axis, +X right, +Y down;
* panorama frame: +X east, +Y down, +Z north;
* pixel ``(i, j)`` (row, column) has its center at ``(u, v) = (j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from georetrieval import rotations
from georetrieval.geodesy import GeoPoint, LocalPose, local_offset

VIRTUAL_CAMERA_HEIGHT = 2.0

# map/ENU (x east, y north, z up) -> panorama frame (x east, y down, z north)
ENU_TO_PANO = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


class BehindCamera(ValueError):
    """The direction does not intersect the image plane (Z <= 0)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan(self.height / (2.0 * self.fy))


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the camera frame into a parent frame."""

    rotation: rotations.Quaternion = rotations.IDENTITY
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", rotations.check_unit(self.rotation))
        t = tuple(float(c) for c in self.translation)
        if len(t) != 3:
            raise ValueError("translation must be a 3-vector")
        object.__setattr__(self, "translation", t)

    @property
    def R(self) -> np.ndarray:
        return rotations.to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-parent transform."""
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class FrustumGrid:
    """Normalized per-pixel, per-depth 3D coordinates of shape ``(H, W, D, 3)``."""

    coords: np.ndarray
    depth_bins: Tuple[float, ...]
    bounds: Tuple[float, float, float, float, float, float]


def intrinsics_from_fov(hfov: float, width: int, height: int) -> Intrinsics:
    """Square-pixel intrinsics with the principal point at the image center."""
    if not 0 < hfov < math.pi:
        raise ValueError("hfov must be in (0, pi)")
    fx = width / (2.0 * math.tan(hfov / 2.0))
    return Intrinsics(fx, fx, width / 2.0, height / 2.0, int(width), int(height))


def pixel_to_ray(K: Intrinsics, u, v) -> np.ndarray:
    """Unit ray through continuous pixel ``(u, v)``; broadcasts over arrays (last axis = xyz)."""
    X = (np.asarray(u, dtype=float) - K.cx) / K.fx
    Y = (np.asarray(v, dtype=float) - K.cy) / K.fy
    n = np.sqrt(X * X + Y * Y + 1.0)
    return np.stack([X / n, Y / n, 1.0 / n], axis=-1)


def project_to_pixel(K: Intrinsics, direction: Sequence[float]) -> Tuple[float, float]:
    X, Y, Z = (float(c) for c in direction)
    if Z <= 0:
        raise BehindCamera(f"direction {direction!r} points behind the camera")
    return K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy


def project_to_pixels(K: Intrinsics, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(u, v, in_front)`` with NaN where ``Z <= 0``."""
    dirs = np.asarray(dirs, dtype=float)
    Z = dirs[..., 2]
    front = Z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, K.fx * dirs[..., 0] / Z + K.cx, np.nan)
        v = np.where(front, K.fy * dirs[..., 1] / Z + K.cy, np.nan)
    return u, v, front


def rotate_ray(pose: Pose, direction: np.ndarray) -> np.ndarray:
    """Rotate camera-frame direction(s) into the parent frame; translation is ignored."""
    d = np.asarray(direction, dtype=float)
    return d @ pose.R.T


def heading_pitch_rotation(heading: float, pitch: float = 0.0) -> rotations.Quaternion:
    """Camera-to-panorama rotation for a compass heading and pitch (radians).

    Heading turns clockwise from north about the down axis, so heading 90 deg
    sends the optical axis to +X (east). Positive pitch tilts the axis up.
    """
    yaw = rotations.about_axis((0.0, 1.0, 0.0), heading)
    tilt = rotations.about_axis((1.0, 0.0, 0.0), pitch)
    return rotations.multiply(yaw, tilt)


def virtual_camera_for_frame(
    ego_geo: GeoPoint,
    pano_geo: GeoPoint,
    ego_pose: LocalPose,
    cam_rotation: Sequence[float],
) -> Pose:
    """Virtual camera at the panorama capture point for one onboard camera.

    ``cam_rotation`` is the calibrated camera-to-ego rotation and
    ``ego_pose.rotation`` the ego-to-map rotation (map x east, y north, z up).
    The returned rotation maps camera rays into the panorama frame; the
    translation is the ego-to-panorama offset expressed in the ego frame with
    its vertical component pinned to :data:`VIRTUAL_CAMERA_HEIGHT`.
    """
    R_ego = rotations.to_matrix(ego_pose.rotation)
    R_cam = rotations.to_matrix(rotations.check_unit(cam_rotation))
    rotation = rotations.from_matrix(ENU_TO_PANO @ R_ego @ R_cam)
    east, north = local_offset(ego_geo, pano_geo)
    local = R_ego.T @ np.array([east, north, 0.0])
    return Pose(rotation, (local[0], local[1], VIRTUAL_CAMERA_HEIGHT))


def _pixel_grid(K: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    u = np.arange(K.width, dtype=float) + 0.5
    v = np.arange(K.height, dtype=float) + 0.5
    return np.meshgrid(u, v)


def frustum_coords(
    K: Intrinsics,
    pose: Pose,
    depth_bins: Sequence[float],
    bounds: Sequence[float],
) -> FrustumGrid:
    """Back-project every pixel center at each depth and normalize into ``bounds``.

    ``bounds`` is ``(x_min, y_min, z_min, x_max, y_max, z_max)`` in the pose's
    parent frame. Each 3D point is ``R @ (ray * depth) + t``, scaled per axis to
    ``[0, 1]`` and clamped. A single depth bin gives one planar slice.
    """
    depths = tuple(float(d) for d in depth_bins)
    if not depths:
        raise ValueError("depth_bins must not be empty")
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError("depth_bins must be strictly increasing")
    lo = np.array(bounds[:3], dtype=float)
    hi = np.array(bounds[3:], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("bounds must satisfy min < max on every axis")

    uu, vv = _pixel_grid(K)
    ray = pixel_to_ray(K, uu, vv)
    R = pose.R
    t = pose.translation
    rx = ray[..., 0][..., None]
    ry = ray[..., 1][..., None]
    rz = ray[..., 2][..., None]
    d = np.array(depths)
    px, py, pz = rx * d, ry * d, rz * d
    # explicit sums keep the result bit-identical to a scalar evaluation
    out = np.empty(px.shape + (3,))
    for k in range(3):
        world = R[k, 0] * px + R[k, 1] * py + R[k, 2] * pz + t[k]
        out[..., k] = np.clip((world - lo[k]) / (hi[k] - lo[k]), 0.0, 1.0)
    out.setflags(write=False)
    return FrustumGrid(out, depths, tuple(float(b) for b in bounds))


# -- calibration file -----------------------------------------------------------

def parse_calibration(doc: dict) -> Tuple[Intrinsics, Pose]:
    K = Intrinsics(doc["fx"], doc["fy"], doc["cx"], doc["cy"], int(doc["width"]), int(doc["height"]))
    pose = Pose(
        (doc["qw"], doc["qx"], doc["qy"], doc["qz"]),
        (doc.get("tx", 0.0), doc.get("ty", 0.0), doc.get("tz", 0.0)),
    )
    return K, pose


def calibration_dict(K: Intrinsics, pose: Pose) -> dict:
    qw, qx, qy, qz = pose.rotation
    tx, ty, tz = pose.translation
    return {
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "width": K.width, "height": K.height,
        "qw": qw, "qx": qx, "qy": qy, "qz": qz,
        "tx": tx, "ty": ty, "tz": tz,
    }


def load_calibration(path) -> Tuple[Intrinsics, Pose]:
    return parse_calibration(json.loads(Path(path).read_text()))
