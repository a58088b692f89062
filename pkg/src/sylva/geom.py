"""Rigid-body transforms and the landmark distance functions.

Poses are world-from-body transforms stored as a unit quaternion plus a
translation. Yaw/pitch/roll follow the Z-Y-X Euler convention everywhere
in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-9


class AxisHorizontalError(ValueError):
    """Cylinder axis is (numerically) horizontal: no ground-plane footprint."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {a.shape}")
    return a


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate point(s) p by quaternion q. p may be (3,) or (N, 3)."""
    w, x, y, z = float(q[0]), float(q[1]), float(q[2]), float(q[3])
    p = np.asarray(p, dtype=float)
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    # u x p, then p + 2w (u x p) + 2 u x (u x p), written out component-wise
    ux = y * pz - z * py
    uy = z * px - x * pz
    uz = x * py - y * px
    out = np.empty_like(p)
    out[..., 0] = px + 2.0 * (w * ux + y * uz - z * uy)
    out[..., 1] = py + 2.0 * (w * uy + z * ux - x * uz)
    out[..., 2] = pz + 2.0 * (w * uz + x * uy - y * ux)
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_yaw_pitch_roll(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Quaternion for R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    return np.array(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ]
    )


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    """World-from-body rigid transform: rotation (unit quaternion wxyz) + translation (m)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        t = _as_vec3(self.translation)
        if q.shape != (4,):
            raise ValueError("rotation must be a wxyz quaternion")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        q = q / n
        if q[0] < 0:  # canonical hemisphere, keeps compose deterministic
            q = -q
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_translation(x: float, y: float, z: float) -> "Pose":
        return Pose(translation=np.array([x, y, z], dtype=float))

    @staticmethod
    def from_yaw_pitch_roll(yaw: float, pitch: float = 0.0, roll: float = 0.0,
                            translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(quat_from_yaw_pitch_roll(yaw, pitch, roll), np.asarray(translation, dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def yaw_pitch_roll(self) -> tuple[float, float, float]:
        """Z-Y-X Euler angles of the rotation."""
        w, x, y, z = self.rotation
        yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
        s = 2 * (w * y - z * x)
        pitch = math.asin(max(-1.0, min(1.0, s)))
        roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
        return yaw, pitch, roll

    @property
    def yaw(self) -> float:
        return self.yaw_pitch_roll()[0]


def pose_compose(a: Pose, b: Pose) -> Pose:
    q = quat_multiply(a.rotation, b.rotation)
    q = q / np.linalg.norm(q)
    t = quat_rotate(a.rotation, b.translation) + a.translation
    return Pose(q, t)


def pose_inverse(a: Pose) -> Pose:
    q_inv = np.array([a.rotation[0], -a.rotation[1], -a.rotation[2], -a.rotation[3]])
    t_inv = -quat_rotate(q_inv, a.translation)
    return Pose(q_inv, t_inv)


def pose_apply(a: Pose, p) -> np.ndarray:
    """Apply the transform to a point or an (N, 3) array of points."""
    return quat_rotate(a.rotation, np.asarray(p, dtype=float)) + a.translation


def pose_delta(a: Pose, b: Pose) -> Pose:
    """Relative transform a^-1 * b (b expressed in a's body frame)."""
    return pose_compose(pose_inverse(a), b)


@dataclass(frozen=True)
class Cylinder:
    """Tree-trunk landmark: a point on the axis, the unit growth axis, and the radius (m)."""

    root: np.ndarray
    axis: np.ndarray
    radius: float

    def __post_init__(self):
        root = _as_vec3(self.root)
        axis = _as_vec3(self.axis)
        n = float(np.linalg.norm(axis))
        if n < 1e-12:
            raise ValueError("cylinder axis is zero")
        axis = axis / n
        if axis[2] < 0:  # canonical upward orientation
            axis = -axis
        if not self.radius > 0:
            raise ValueError(f"cylinder radius must be positive, got {self.radius}")
        root.setflags(write=False)
        axis.setflags(write=False)
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "radius", float(self.radius))

    def footprint(self) -> np.ndarray:
        """Intersection of the axis with the z = 0 plane, as an xy pair."""
        if abs(self.axis[2]) < 1e-6:
            raise AxisHorizontalError("axis too horizontal to project to the ground plane")
        t = -self.root[2] / self.axis[2]
        p = self.root + t * self.axis
        return p[:2]

    def transformed(self, pose: Pose) -> "Cylinder":
        """The same cylinder expressed through a rigid transform."""
        return Cylinder(
            pose_apply(pose, self.root),
            quat_rotate(pose.rotation, self.axis),
            self.radius,
        )


@dataclass(frozen=True)
class PlaneModel:
    """Plane normal . p + offset = 0 with the centroid of the points it was fitted from."""

    normal: np.ndarray
    offset: float
    centroid: np.ndarray

    def __post_init__(self):
        normal = _as_vec3(self.normal)
        centroid = _as_vec3(self.centroid)
        n = float(np.linalg.norm(normal))
        if abs(n - 1.0) > 1e-6:
            raise ValueError("plane normal must be unit length")
        normal = normal / n
        if abs(float(normal @ centroid) + self.offset) > 1e-6:
            raise ValueError("centroid does not lie on the plane")
        normal.setflags(write=False)
        centroid.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "offset", float(self.offset))

    @staticmethod
    def fit(points: np.ndarray) -> "PlaneModel":
        """Total-least-squares plane through >= 3 points; normal canonicalized upward."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 3:
            raise ValueError("need at least 3 points of dimension 3")
        centroid = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
        normal = vt[-1]
        if normal[2] < 0:
            normal = -normal
        offset = -float(normal @ centroid)
        return PlaneModel(normal, offset, centroid)

    def transformed(self, pose: Pose) -> "PlaneModel":
        normal = quat_rotate(pose.rotation, self.normal)
        centroid = pose_apply(pose, self.centroid)
        return PlaneModel(normal, -float(normal @ centroid), centroid)


def point_to_axis_distance(c: Cylinder, p) -> np.ndarray:
    """Distance from point(s) to the infinite axis line of the cylinder."""
    d = np.asarray(p, dtype=float) - c.root
    along = d @ c.axis
    radial = d - np.multiply.outer(along, c.axis)
    return np.linalg.norm(radial, axis=-1)


def point_to_cylinder_distance(c: Cylinder, p) -> np.ndarray:
    """Unsigned radial residual |dist(p, axis) - radius|.

    Unconstrained along the axis, so a cylinder can pin down only the
    directions perpendicular to its axis.
    """
    return np.abs(point_to_axis_distance(c, p) - c.radius)


def point_to_plane_distance(plane: PlaneModel, p) -> np.ndarray:
    """Unsigned point-to-plane distance |normal . p + offset|."""
    return np.abs(np.asarray(p, dtype=float) @ plane.normal + plane.offset)


def cylinder_to_cylinder_distance(a: Cylinder, b: Cylinder) -> float:
    """Ground-footprint distance plus radius mismatch.

    Both axes are intersected with the z = 0 plane; the score is the planar
    Euclidean distance between those footprints plus |radius_a - radius_b|.
    """
    fa = a.footprint()
    fb = b.footprint()
    return float(np.linalg.norm(fa - fb)) + abs(a.radius - b.radius)
