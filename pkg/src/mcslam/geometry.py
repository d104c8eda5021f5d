"""Rigid (SE(3)) and similarity (Sim(3)) transforms.

Conventions used throughout the package:

* se(3) twists are ordered ``(omega, upsilon)``, sim(3) twists
  ``(omega, upsilon, lam)`` with ``lam = log(scale)``.
* Body poses ``M_t`` map body coordinates to world coordinates, camera
  extrinsics ``M_c`` map camera coordinates to body coordinates, so a world
  point reaches camera ``c`` as ``M_c^-1 M_t^-1 p``.
* A similarity ``S = [sR, t]`` acts on points as ``s R p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

# (t - sin t)/t^3 and the log coefficient cancel badly well above 1e-8; below
# 1e-2 the 6th-order series is exact to machine precision.
SMALL_ANGLE = 1e-2
NEAR_PI = 1e-6


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; works on (3,) and (..., 3) inputs."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    # A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return (1.0 - t2 / 6.0 + t4 / 120.0 - t4 * t2 / 5040.0,
                0.5 - t2 / 24.0 + t4 / 720.0 - t4 * t2 / 40320.0,
                1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0)
    s = np.sin(theta)
    h = np.sin(0.5 * theta) / theta
    return s / theta, 2.0 * h * h, (theta - s) / theta**3


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rodrigues_coeffs(theta)
    W = skew(omega)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    axis = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = float(np.linalg.norm(axis))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(sin_t, cos_t))
    if np.pi - theta < NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta!r} is within {NEAR_PI} of pi")
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return axis * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    return axis * (theta / sin_t)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    _, b, c = _rodrigues_coeffs(theta)
    W = skew(omega)
    return np.eye(3) + b * W + c * (W @ W)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for (omega, upsilon) twists: T exp(x) T^-1 = exp(Ad x)."""
        Ad = np.zeros((6, 6))
        Ad[:3, :3] = self.rotation
        Ad[3:, :3] = skew(self.translation) @ self.rotation
        Ad[3:, 3:] = self.rotation
        return Ad

    def almost_equal(self, other: "SE3Pose", tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=tol, rtol=0.0))

    def __repr__(self) -> str:
        return f"SE3Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def se3_exp(xi: np.ndarray) -> SE3Pose:
    xi = np.asarray(xi, dtype=float)
    omega, upsilon = xi[:3], xi[3:6]
    theta = float(np.linalg.norm(omega))
    a, b, c = _rodrigues_coeffs(theta)
    W = skew(omega)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return SE3Pose(R, V @ upsilon)


def se3_log(pose: SE3Pose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 ** 3 / 1209600.0
    else:
        a, b, _ = _rodrigues_coeffs(theta)
        k = (1.0 - a / (2.0 * b)) / theta**2
    V_inv = np.eye(3) - 0.5 * W + k * (W @ W)
    return np.concatenate([omega, V_inv @ pose.translation])


def relative_pose(M_i: SE3Pose, M_j: SE3Pose) -> SE3Pose:
    """``M_j M_i^-1`` in exactly that composition order."""
    return M_j.compose(M_i.inverse())


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity ``p -> s R p + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = float(self.scale)
        if not s > 0.0:
            raise ValueError(f"similarity scale must be positive, got {s}")
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_rigid(cls, pose: SE3Pose, scale: float = 1.0) -> "Sim3Transform":
        return cls(scale, pose.rotation, pose.translation)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Sim3Transform":
        T = np.asarray(T, dtype=float)
        sR = T[:3, :3]
        s = float(np.cbrt(np.linalg.det(sR)))
        return cls(s, sR / s, T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Sim3Transform":
        Rt = self.rotation.T
        return Sim3Transform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform(self.scale * other.scale,
                             self.rotation @ other.rotation,
                             self.scale * (self.rotation @ other.translation) + self.translation)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * (points @ self.rotation.T) + self.translation

    def adjoint(self) -> np.ndarray:
        """7x7 adjoint for (omega, upsilon, lam) twists."""
        R, t, s = self.rotation, self.translation, self.scale
        Ad = np.zeros((7, 7))
        Ad[:3, :3] = R
        Ad[3:6, :3] = skew(t) @ R
        Ad[3:6, 3:6] = s * R
        Ad[3:6, 6] = -t
        Ad[6, 6] = 1.0
        return Ad

    def almost_equal(self, other: "Sim3Transform", tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=tol, rtol=0.0))

    def __repr__(self) -> str:
        return (f"Sim3Transform(s={self.scale!r}, R={self.rotation.tolist()}, "
                f"t={self.translation.tolist()})")


def _sim3_w_matrix(omega: np.ndarray, lam: float) -> np.ndarray:
    # integral_0^1 exp(u (Omega + lam I)) du, via the top-right block of a 6x6 exponential
    G = np.zeros((6, 6))
    G[:3, :3] = skew(omega) + lam * np.eye(3)
    G[:3, 3:] = np.eye(3)
    return expm(G)[:3, 3:]


def sim3_exp(xi: np.ndarray) -> Sim3Transform:
    xi = np.asarray(xi, dtype=float)
    omega, upsilon, lam = xi[:3], xi[3:6], float(xi[6])
    W = _sim3_w_matrix(omega, lam)
    return Sim3Transform(np.exp(lam), so3_exp(omega), W @ upsilon)


def sim3_log(S: Sim3Transform) -> np.ndarray:
    omega = so3_log(S.rotation)
    lam = float(np.log(S.scale))
    W = _sim3_w_matrix(omega, lam)
    return np.concatenate([omega, np.linalg.solve(W, S.translation), [lam]])


def sim3_ad(xi: np.ndarray) -> np.ndarray:
    """Lie-bracket matrix of sim(3): ad(x) y = [x, y]."""
    omega, upsilon, lam = xi[:3], xi[3:6], float(xi[6])
    ad = np.zeros((7, 7))
    W = skew(omega)
    ad[:3, :3] = W
    ad[3:6, :3] = skew(upsilon)
    ad[3:6, 3:6] = W + lam * np.eye(3)
    ad[3:6, 6] = -upsilon
    return ad


def sim3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """sum_n ad(x)^n / (n+1)!, evaluated through a block matrix exponential."""
    G = np.zeros((14, 14))
    G[:7, :7] = sim3_ad(np.asarray(xi, dtype=float))
    G[:7, 7:] = np.eye(7)
    return expm(G)[:7, 7:]


def sim3_to_rigid(S: Sim3Transform) -> SE3Pose:
    """Drop the scale of a world-to-body similarity: ``[R, t/s]``."""
    return SE3Pose(S.rotation, S.translation / S.scale)


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_x(angle: float) -> np.ndarray:
    return so3_exp(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> np.ndarray:
    return so3_exp(np.array([0.0, angle, 0.0]))


def rot_z(angle: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, angle]))


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))
