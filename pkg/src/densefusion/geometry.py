"""Rigid-body pose algebra, pinhole projection and point-cloud helpers.

Rotations are unit quaternions in (w, x, y, z) order with ``w >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import NonPositiveDepth


def _canonical_quat(q):
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _canonical_quat(q)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping model-frame points into the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _canonical_quat(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_axis_angle(cls, axis, angle, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
        return cls(q, t)

    @classmethod
    def from_array(cls, values) -> "Pose":
        """Build from the 7-number (qw, qx, qy, qz, tx, ty, tz) layout."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (7,):
            raise ValueError(f"pose array must have 7 entries, got shape {values.shape}")
        return cls(values[:4], values[4:])

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix4(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.translation

    def rotation_angle(self) -> float:
        return 2.0 * float(np.arctan2(np.linalg.norm(self.rotation[1:]), abs(self.rotation[0])))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(q=[{q}], t=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.matrix @ b.translation + a.translation
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    q = p.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    t = -(quat_to_matrix(q) @ p.translation)
    return Pose(q, t)


def pose_distance(a: Pose, b: Pose):
    """(rotation angle in radians, translation distance in meters) between two poses."""
    d = compose(inverse(a), b)
    return d.rotation_angle(), float(np.linalg.norm(a.translation - b.translation))


def random_pose(rng: np.random.Generator, max_angle=np.pi, max_translation=1.0) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, max_translation)
    return Pose.from_axis_angle(axis, angle, t)


def perturb_pose(p: Pose, rng: np.random.Generator, max_angle: float, max_translation: float) -> Pose:
    """Left-multiply ``p`` by a random rotation about the object centre and a random offset.

    The rotation angle and offset length are drawn uniformly in [0, max].
    """
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * rng.uniform(0.0, max_translation)
    delta = Pose.from_axis_angle(axis, angle)
    return Pose(quat_multiply(delta.rotation, p.rotation), p.translation + offset)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 140.0
    fy: float = 140.0
    cx: float = 80.0
    cy: float = 60.0
    width: int = 160
    height: int = 120

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def project(k: CameraIntrinsics, point):
    """Pinhole projection of a single camera-frame point to ``(u, v, depth)``."""
    x, y, z = np.asarray(point, dtype=np.float64).reshape(3)
    if z <= 0:
        raise NonPositiveDepth(f"cannot project point with depth {z}")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def backproject(k: CameraIntrinsics, u, v, depth) -> np.ndarray:
    if depth <= 0:
        raise NonPositiveDepth(f"cannot backproject pixel with depth {depth}")
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def project_points(k: CameraIntrinsics, points):
    """Vectorised :func:`project`; returns ``(uv, z)`` with ``uv`` of shape (n, 2)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project points with non-positive depth")
    u = k.fx * points[:, 0] / z + k.cx
    v = k.fy * points[:, 1] / z + k.cy
    return np.stack([u, v], axis=1), z


def backproject_pixels(k: CameraIntrinsics, pixel_index, depth) -> np.ndarray:
    """Vectorised :func:`backproject`; ``pixel_index`` rows are (row, col) = (v, u)."""
    pixel_index = np.asarray(pixel_index)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("cannot backproject pixels with non-positive depth")
    v = pixel_index[:, 0].astype(np.float64)
    u = pixel_index[:, 1].astype(np.float64)
    return np.stack([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth], axis=1)


@dataclass(frozen=True)
class PointCloud:
    """Points in meters with optional per-point colors and source pixels (row, col)."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    pixel_index: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(colors) != n:
                raise ValueError("colors must match points in length")
            object.__setattr__(self, "colors", colors)
        if self.pixel_index is not None:
            idx = np.asarray(self.pixel_index, dtype=np.int64).reshape(-1, 2)
            if len(idx) != n:
                raise ValueError("pixel_index must match points in length")
            object.__setattr__(self, "pixel_index", idx)

    def __len__(self):
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.points[index],
            None if self.colors is None else self.colors[index],
            None if self.pixel_index is None else self.pixel_index[index],
        )


def transform_points(p: Pose, c: PointCloud) -> PointCloud:
    return PointCloud(p.apply(c.points), c.colors, c.pixel_index)
