"""Quaternion helpers (scalar-first ``(w, x, y, z)`` everywhere in this package)."""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

Quaternion = Tuple[float, float, float, float]

IDENTITY: Quaternion = (1.0, 0.0, 0.0, 0.0)
UNIT_TOLERANCE = 1e-9


def check_unit(q: Sequence[float]) -> Quaternion:
    if len(q) != 4:
        raise ValueError(f"quaternion needs 4 components, got {len(q)}")
    q = tuple(float(c) for c in q)
    norm = math.sqrt(sum(c * c for c in q))
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise ValueError(f"quaternion is not unit length (norm={norm!r})")
    return q  # type: ignore[return-value]


def to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def from_matrix(R: np.ndarray) -> Quaternion:
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    return (float(w), float(x), float(y), float(z))


def multiply(a: Sequence[float], b: Sequence[float]) -> Quaternion:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def conjugate(q: Sequence[float]) -> Quaternion:
    w, x, y, z = q
    return (w, -x, -y, -z)


def about_axis(axis: Sequence[float], angle: float) -> Quaternion:
    ax = np.asarray(axis, dtype=float)
    ax = ax / np.linalg.norm(ax)
    s = math.sin(angle / 2.0)
    return (math.cos(angle / 2.0), float(ax[0] * s), float(ax[1] * s), float(ax[2] * s))


def yaw_of(q: Sequence[float]) -> float:
    """Heading of the body +x axis in the map x/y plane, counter-clockwise from +x."""
    R = to_matrix(q)
    return math.atan2(R[1, 0], R[0, 0])
