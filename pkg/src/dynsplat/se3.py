"""
Rigid-body math on SE(3): quaternions, twists, dual quaternions.

Conventions used everywhere in the package:

- quaternions are stored as (w, x, y, z), Hamilton product, right-handed;
- a pose acts on column vectors, ``x' = R x + t``;
- a twist is ordered (rotational, translational) = (omega, v).

All value types are immutable; every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyBlend, NearAngularSingularity

SMALL_ANGLE = 1e-6
SINGULAR_MARGIN = 1e-3


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    # leave already-unit quaternions untouched so normalisation is idempotent
    return q.copy() if abs(n - 1.0) <= 1e-15 else q / n


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_angle(q) -> float:
    """Rotation angle in [0, pi] of a unit quaternion."""
    q = np.asarray(q, dtype=float)
    return 2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0]))


@dataclass(frozen=True)
class Twist:
    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotational", np.asarray(self.rotational, dtype=float).reshape(3))
        object.__setattr__(self, "translational", np.asarray(self.translational, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotational, self.translational])

    def __mul__(self, s: float) -> "Twist":
        return Twist(self.rotational * s, self.translational * s)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "SE3Pose":
        M = np.asarray(M, dtype=float)
        return cls(rotmat_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_tum(cls, tx, ty, tz, qx, qy, qz, qw) -> "SE3Pose":
        return cls(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "SE3Pose":
        qi = quat_conj(self.rotation)
        return SE3Pose(qi, -quat_to_rotmat(qi) @ self.translation)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        q = quat_mul(self.rotation, other.rotation)
        return SE3Pose(q, self.R @ other.translation + self.translation)

    def act(self, points) -> np.ndarray:
        """Apply to a point (3,) or a stack of points (..., 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def angle(self) -> float:
        return quat_angle(self.rotation)

    def to_dualquat(self) -> "DualQuat":
        r = self.rotation
        d = 0.5 * quat_mul(np.concatenate([[0.0], self.translation]), r)
        return DualQuat(r, d)

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return pose_distance(self, other) <= atol


def pose_distance(a: SE3Pose, b: SE3Pose) -> float:
    """Max abs difference of the 3x4 matrices."""
    return float(np.max(np.abs(a.as_matrix()[:3] - b.as_matrix()[:3])))


@dataclass(frozen=True)
class DualQuat:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float).reshape(4))

    def to_pose(self) -> SE3Pose:
        t = 2.0 * quat_mul(self.dual, quat_conj(self.real))
        return SE3Pose(self.real, t[1:])


def _so3_coeffs(theta: float):
    """(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with a series below SMALL_ANGLE."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    A, B, _ = _so3_coeffs(theta)
    K = skew(omega)
    return np.eye(3) + A * K + B * (K @ K)


def se3_exp(xi: Twist) -> SE3Pose:
    omega, v = xi.rotational, xi.translational
    theta = float(np.linalg.norm(omega))
    half = 0.5 * theta
    if theta < SMALL_ANGLE:
        # sin(h)/theta = 1/2 - theta^2/48
        k = 0.5 - theta * theta / 48.0
    else:
        k = math.sin(half) / theta
    q = np.concatenate([[math.cos(half)], k * omega])
    _, B, C = _so3_coeffs(theta)
    K = skew(omega)
    V = np.eye(3) + B * K + C * (K @ K)
    return SE3Pose(q, V @ v)


def se3_log(T: SE3Pose) -> Twist:
    q = T.rotation if T.rotation[0] >= 0 else -T.rotation
    vn = float(np.linalg.norm(q[1:]))
    theta = 2.0 * math.atan2(vn, q[0])
    if theta >= math.pi - SINGULAR_MARGIN:
        raise NearAngularSingularity(f"rotation angle {theta:.6f} too close to pi")
    if theta < SMALL_ANGLE:
        # theta / sin(theta/2) = 2 + theta^2 / 12
        omega = (2.0 + theta * theta / 12.0) * q[1:]
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        omega = theta / vn * q[1:]
        A, B, _ = _so3_coeffs(theta)
        coef = (1.0 - A / (2.0 * B)) / theta**2
    K = skew(omega)
    Vinv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return Twist(omega, Vinv @ T.translation)


def dqb(weights: Sequence[float], transforms: Sequence[DualQuat]) -> SE3Pose:
    """Blend rigid transforms with normalised weights; hemisphere-aligned to the first operand."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(w) == 0 or len(w) != len(transforms):
        raise EmptyBlend("weights and transforms must be nonempty and equally long")
    if np.any(w < 0):
        raise ValueError("blend weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise EmptyBlend("all blend weights are zero")
    w = w / total
    ref = transforms[0].real
    real = np.zeros(4)
    dual = np.zeros(4)
    for wi, dq in zip(w, transforms):
        s = -1.0 if np.dot(dq.real, ref) < 0 else 1.0
        real += s * wi * dq.real
        dual += s * wi * dq.dual
    n = np.linalg.norm(real)
    real, dual = real / n, dual / n
    dual = dual - np.dot(real, dual) * real
    return DualQuat(real, dual).to_pose()


def interpolate_pose(T_s: SE3Pose, T_e: SE3Pose, fraction: float) -> SE3Pose:
    """Geodesic point ``exp(f * log(T_s^-1 T_e))``: identity at 0, the relative motion at 1."""
    rel = T_s.inverse() @ T_e
    if fraction == 0:
        return SE3Pose.identity()
    if fraction == 1:
        return rel
    return se3_exp(se3_log(rel) * float(fraction))


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, trans_scale: float = 1.0) -> SE3Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return se3_exp(Twist(axis * angle, np.zeros(3))) @ SE3Pose(translation=rng.normal(size=3) * trans_scale)
