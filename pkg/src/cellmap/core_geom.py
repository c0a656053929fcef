"""Rigid transforms, the SE(3) exponential/logarithm and scan containers.

Tangent vectors are ordered ``(rho, phi)``: translation part first, rotation
part second. Pose increments are applied on the left, ``T <- exp(xi) @ T``.
Quaternions are stored scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from cellmap.errors import AngleNearPi

SMALL_ANGLE = 1e-8
MAX_LOG_ANGLE = math.pi - 1e-6
R_MIN = 0.5


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for an (N, 3) array."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest diagonal term for stability.
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] >= R[2, 2]:
        s = 2.0 * math.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


QUAT_UNIT_TOL = 4e-16


def _normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q}")
    # Leave already-unit quaternions bit-for-bit alone so stored poses round-trip.
    if abs(n - 1.0) > QUAT_UNIT_TOL:
        q = q / n
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``p -> R p + t`` with a unit-quaternion rotation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _normalize_quat(self.quat)
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t}")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> PoseSE3:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> PoseSE3:
        return cls(matrix_to_quat(R), t)

    @cached_property
    def rotation(self) -> np.ndarray:
        R = quat_to_matrix(self.quat)
        R.setflags(write=False)
        return R

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: PoseSE3) -> PoseSE3:
        q = quat_multiply(self.quat, other.quat)
        t = self.rotation @ other.translation + self.translation
        return PoseSE3(q, t)

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return self.compose(other)

    def inverse(self) -> PoseSE3:
        qi = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return PoseSE3(qi, -(self.rotation.T @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform a single point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        w = min(abs(self.quat[0]), 1.0)
        v = np.linalg.norm(self.quat[1:])
        return 2.0 * math.atan2(v, w)

    def __repr__(self) -> str:
        q = ", ".join(f"{x:.6g}" for x in self.quat)
        t = ", ".join(f"{x:.6g}" for x in self.translation)
        return f"PoseSE3(q=[{q}], t=[{t}])"


def transform_point(P: PoseSE3, p) -> np.ndarray:
    return P.apply(p)


def pose_error(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """Translation distance (m) and rotation angle (rad) between two poses."""
    d = a.inverse() @ b
    return float(np.linalg.norm(a.translation - b.translation)), d.angle()


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * (K @ K)
    )


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def _se3_q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian."""
    theta = float(np.linalg.norm(phi))
    P, Rx = skew(phi), skew(rho)
    PR, RP = P @ Rx, Rx @ P
    PRP = P @ Rx @ P
    if theta < 1e-4:
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        t2 = theta * theta
        c1 = (theta - math.sin(theta)) / theta**3
        c2 = (0.5 * t2 + math.cos(theta) - 1.0) / t2**2
        c3 = -0.5 * (
            (1.0 - 0.5 * t2 - math.cos(theta)) / t2**2
            - 3.0 * (theta - math.sin(theta) - theta**3 / 6.0) / (t2 * t2 * theta)
        )
    return 0.5 * Rx + c1 * (PR + RP + PRP) + c2 * (P @ PR + RP @ P - 3.0 * PRP) + c3 * (PRP @ P + P @ PRP)


def se3_left_jacobian_inv(xi) -> np.ndarray:
    """Inverse of the 6x6 SE(3) left Jacobian, (rho, phi) ordering."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    Ji = so3_left_jacobian_inv(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ _se3_q(xi[:3], xi[3:]) @ Ji
    return out


def se3_exp(xi) -> PoseSE3:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        q = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
    else:
        s = math.sin(0.5 * theta) / theta
        q = np.array([math.cos(0.5 * theta), s * phi[0], s * phi[1], s * phi[2]])
    return PoseSE3(q, so3_left_jacobian(phi) @ rho)


def se3_log(P: PoseSE3) -> np.ndarray:
    q = P.quat
    v = q[1:]
    vn = float(np.linalg.norm(v))
    theta = 2.0 * math.atan2(vn, q[0])
    if theta >= MAX_LOG_ANGLE:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if vn < 0.5 * SMALL_ANGLE:
        phi = 2.0 * v / q[0]
    else:
        phi = theta / vn * v
    rho = so3_left_jacobian_inv(phi) @ P.translation
    return np.concatenate([rho, phi])


def adjoint(P: PoseSE3) -> np.ndarray:
    """6x6 adjoint for (rho, phi) ordering: exp(Ad xi) = P exp(xi) P^-1."""
    R = P.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(P.translation) @ R
    A[3:, 3:] = R
    return A


def se3_ad(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((6, 6))
    A[:3, :3] = skew(xi[3:])
    A[:3, 3:] = skew(xi[:3])
    A[3:, 3:] = skew(xi[3:])
    return A


@dataclass(frozen=True, eq=False)
class Scan:
    """Sensor-frame points of one frame; returns closer than ``r_min`` are dropped."""

    points: np.ndarray
    frame_id: int = 0
    r_min: float = R_MIN

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        pts = pts[np.linalg.norm(pts, axis=1) >= self.r_min]
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point falling in each voxel; order of survivors preserved."""
    if voxel <= 0 or len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]
