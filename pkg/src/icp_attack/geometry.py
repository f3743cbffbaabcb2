"""SE(3) / so(3) arithmetic and the ICP pose-error metric.

Twists are ordered translation-first, ``xi = (rho, phi)``, and perturbations
are applied on the left: ``T <- exp(delta) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SMALL_ANGLE = 1e-8
# Below this angle the cancelling Jacobian coefficients use their Taylor series.
SERIES_ANGLE = 1e-2
# Below this distance from pi the axis is read from the symmetric part of R.
NEAR_PI = 1e-3


class PoseValidationError(ValueError):
    """Raised when a matrix is not a valid rigid transform."""


def hat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _coef_b(theta: float) -> float:
    """(1 - cos t) / t^2, written without cancellation."""
    h = math.sin(theta / 2.0) / theta
    return 2.0 * h * h


def _coef_c(theta: float) -> float:
    """(t - sin t) / t^3."""
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return (theta - math.sin(theta)) / theta**3


def _coef_inv(theta: float) -> float:
    """(1 - (t/2) cot(t/2)) / t^2."""
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    half = theta / 2.0
    return (1.0 - half / math.tan(half)) / theta**2


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + (math.sin(theta) / theta) * K + _coef_b(theta) * K @ K


def so3_log(C: np.ndarray) -> np.ndarray:
    """Rotation vector of ``C`` with angle in [0, pi]."""
    C = np.asarray(C, dtype=float)
    skew = vee(C - C.T) / 2.0  # sin(theta) * axis
    s = float(np.linalg.norm(skew))
    c = (np.trace(C) - 1.0) / 2.0
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return skew
    if math.pi - theta > NEAR_PI:
        return (theta / s) * skew
    # Near pi: (C + C^T)/2 = cos(theta) I + (1 - cos(theta)) a a^T.
    aat = ((C + C.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(aat)))
    axis = aat[:, i] / math.sqrt(aat[i, i])
    if axis @ skew < 0.0:
        axis = -axis
    elif s == 0.0:
        # theta == pi exactly: a and -a are equivalent, fix the sign.
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        if axis[nz[0]] < 0.0:
            axis = -axis
    return theta * axis / np.linalg.norm(axis)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return np.eye(3) + _coef_b(theta) * K + _coef_c(theta) * K @ K


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    return np.eye(3) - 0.5 * K + _coef_inv(theta) * K @ K


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, atol: float = 1e-6) -> Pose:
        m = np.asarray(m, dtype=float)
        if m.size != 16:
            raise PoseValidationError(f"expected 16 entries, got {m.size}")
        m = m.reshape(4, 4)
        if not np.all(np.isfinite(m)):
            raise PoseValidationError("non-finite pose entries")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=atol):
            raise PoseValidationError("bottom row must be [0, 0, 0, 1]")
        R = m[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=atol) or np.linalg.det(R) <= 0:
            raise PoseValidationError("rotation block is not in SO(3)")
        return cls(R, m[:3, 3])

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Pose:
        return cls.from_matrix(np.asarray(values, dtype=float))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_list(self) -> list[float]:
        """Row-major 4x4 entries."""
        return [float(v) for v in self.matrix().ravel()]

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0.0)

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def exp_se3(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log_se3(T: Pose) -> np.ndarray:
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return np.concatenate([rho, phi])


def se3_adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint for (rho, phi) ordering: exp(Ad(T) xi) = T exp(xi) T^-1."""
    C = T.rotation
    ad = np.zeros((6, 6))
    ad[:3, :3] = C
    ad[:3, 3:] = hat(T.translation) @ C
    ad[3:, 3:] = C
    return ad


def se3_curly(xi) -> np.ndarray:
    """Small adjoint ad(xi)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((6, 6))
    P = hat(xi[3:])
    out[:3, :3] = P
    out[:3, 3:] = hat(xi[:3])
    out[3:, 3:] = P
    return out


def se3_left_jacobian(xi, tol: float = 1e-18, max_terms: int = 80) -> np.ndarray:
    """Left Jacobian sum_n ad(xi)^n / (n+1)!.

    The series is entire; for rotation angles up to pi it reaches double
    precision in well under 40 terms.
    """
    ad = se3_curly(xi)
    out = np.eye(6)
    term = np.eye(6)
    for n in range(1, max_terms):
        term = term @ ad / (n + 1)
        out += term
        if np.abs(term).max() < tol:
            break
    return out


@dataclass(frozen=True)
class PoseError:
    rho: np.ndarray
    phi: np.ndarray

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    @property
    def planar_norm(self) -> float:
        return float(math.hypot(self.rho[0], self.rho[1]))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.xi]


def pose_error(T_hat: Pose, T_gt: Pose) -> PoseError:
    xi = log_se3(T_hat @ T_gt.inverse())
    return PoseError(xi[:3].copy(), xi[3:].copy())


def euler_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return (
        so3_exp([0.0, 0.0, yaw])
        @ so3_exp([0.0, pitch, 0.0])
        @ so3_exp([roll, 0.0, 0.0])
    )


def _intervals(bounds, name: str) -> np.ndarray:
    arr = np.asarray(bounds, dtype=float)
    if arr.shape == (2,):
        arr = np.tile(arr, (3, 1))
    if arr.shape != (3, 2):
        raise ValueError(f"{name}: expected (lo, hi) or three (lo, hi) pairs")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite bounds")
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ValueError(f"{name}: empty interval {arr.tolist()}")
    return arr


def sample_random_pose(trans_range, rot_range_deg, seed) -> Pose:
    """Uniform per-axis translation and Euler angles (z-y-x order).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    t_iv = _intervals(trans_range, "trans_range")
    r_iv = np.deg2rad(_intervals(rot_range_deg, "rot_range_deg"))
    rng = np.random.default_rng(seed)
    t = rng.uniform(t_iv[:, 0], t_iv[:, 1])
    roll, pitch, yaw = rng.uniform(r_iv[:, 0], r_iv[:, 1])
    return Pose(euler_zyx(roll, pitch, yaw), t)


SHAPENET_POSE_RANGES = {
    "trans_range": [(-0.08, 0.08), (-0.08, 0.08), (0.0, 0.0)],
    "rot_range_deg": [(0.0, 0.0), (0.0, 0.0), (-10.0, 10.0)],
}
BOREAS_POSE_RANGES = {
    "trans_range": [(-0.3, 0.3)] * 3,
    "rot_range_deg": [(-10.0, 10.0)] * 3,
}
