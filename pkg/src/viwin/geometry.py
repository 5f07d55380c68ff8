"""Rotation and rigid-transform primitives.

Conventions used throughout the package:

* Quaternions are Hamiltonian, stored as ``(w, x, y, z)`` and kept in the
  canonical half-space ``w >= 0`` so that logarithms always return the
  short-arc rotation vector.
* Orientation perturbations are multiplicative on the left (world frame):
  ``q = Exp(delta) * q_bar``.  Every analytic Jacobian in the package uses
  this convention.
* A pose perturbation is the 6-vector ``[delta_r, delta_alpha]`` with the
  translation part additive and the rotation part as above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class Quaternion:
    """Unit quaternion, ``wxyz`` layout, Hamilton convention."""

    wxyz: np.ndarray

    def __post_init__(self) -> None:
        self.wxyz = np.asarray(self.wxyz, dtype=float)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def w(self) -> float:
        return float(self.wxyz[0])

    @property
    def vec(self) -> np.ndarray:
        return self.wxyz[1:]

    def normalized(self) -> "Quaternion":
        """Unit-norm, canonical (w >= 0) copy."""
        q = self.wxyz / math.sqrt(self.wxyz @ self.wxyz)
        if q[0] < 0.0:
            q = -q
        return Quaternion(q)

    def conjugate(self) -> "Quaternion":
        w, x, y, z = self.wxyz
        return Quaternion(np.array([w, -x, -y, -z]))

    inverse = conjugate  # unit quaternions only

    def multiply(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self.wxyz
        w2, x2, y2, z2 = other.wxyz
        out = np.array(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ]
        )
        return Quaternion(out).normalized()

    def __matmul__(self, other: "Quaternion") -> "Quaternion":
        return self.multiply(other)

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.wxyz
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.rotation_matrix() @ v

    def copy(self) -> "Quaternion":
        return Quaternion(self.wxyz.copy())


def quat_exp(v: np.ndarray) -> Quaternion:
    """Group exponential of a rotation vector.

    Smooth through zero: below :data:`SMALL_ANGLE` a second-order series
    replaces the sin/cos form.
    """
    v = np.asarray(v, dtype=float)
    angle = math.sqrt(v @ v)
    q = np.empty(4)
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48
        q[0] = 1.0 - angle * angle / 8.0
        q[1:] = (0.5 - angle * angle / 48.0) * v
    else:
        half = 0.5 * angle
        q[0] = math.cos(half)
        q[1:] = math.sin(half) / angle * v
    return Quaternion(q).normalized()


def quat_log(q: Quaternion) -> np.ndarray:
    """Rotation vector of a unit quaternion; norm always <= pi."""
    qc = q.normalized()
    w = qc.w
    vec = qc.wxyz[1:]
    n = math.sqrt(vec @ vec)
    if n < SMALL_ANGLE:
        # atan2(n, w)/n ~ 1/w for tiny n (w ~ 1 after canonicalization)
        return 2.0 / w * vec
    angle = 2.0 * math.atan2(n, w)
    return angle / n * vec


def box_plus(q: Quaternion, delta: np.ndarray) -> Quaternion:
    """Left-multiplicative update ``Exp(delta) * q``."""
    return quat_exp(delta) @ q


def box_minus(q: Quaternion, q_prime: Quaternion) -> np.ndarray:
    """Rotation vector ``Log(q * q'^-1)``, inverse of :func:`box_plus`."""
    return quat_log(q @ q_prime.inverse())


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of Exp: Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - math.cos(angle)) / a2 * K
        + (angle - math.sin(angle)) / (a2 * angle) * (K @ K)
    )


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(phi @ phi)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    a2 = angle * angle
    coeff = 1.0 / a2 - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


@dataclass
class Pose:
    """Rigid transform ``T_AB = (r, q)``: ``p_A = q * p_B + r``."""

    r: np.ndarray
    q: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self) -> None:
        self.r = np.asarray(self.r, dtype=float)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), Quaternion.identity())

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.r + self.q.rotate(other.r), self.q @ other.q)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        q_inv = self.q.inverse().normalized()
        return Pose(-q_inv.rotate(self.r), q_inv)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.q.rotation_matrix()
        T[:3, 3] = self.r
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        return Pose(np.array(T[:3, 3]), rotation_matrix_to_quat(T[:3, :3]))

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Apply to a Euclidean 3-vector."""
        return self.q.rotate(p) + self.r

    def copy(self) -> "Pose":
        return Pose(self.r.copy(), self.q.copy())


def transform_point(T: Pose, p: np.ndarray) -> np.ndarray:
    """Apply a pose to a homogeneous 4-vector."""
    p = np.asarray(p, dtype=float)
    out = np.empty(4)
    out[:3] = T.q.rotate(p[:3]) + p[3] * T.r
    out[3] = p[3]
    return out


def rotation_matrix_to_quat(R: np.ndarray) -> Quaternion:
    """Shepperd's method, stable for all rotation matrices."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return Quaternion(q).normalized()


def pose_box_plus(T: Pose, delta: np.ndarray) -> Pose:
    """Apply a 6-vector ``[delta_r, delta_alpha]`` perturbation."""
    delta = np.asarray(delta, dtype=float)
    return Pose(T.r + delta[:3], box_plus(T.q, delta[3:]))


def pose_box_minus(T: Pose, T_prime: Pose) -> np.ndarray:
    """6-vector with ``pose_box_plus(T', result) == T``."""
    return np.concatenate([T.r - T_prime.r, box_minus(T.q, T_prime.q)])
