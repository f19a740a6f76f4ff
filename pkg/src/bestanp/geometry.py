"""SO(3) primitives: hat/exp/log, nearest-rotation projection and geodesic error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
RANK_TOL = 1e-12


class AngleAtPi(ValueError):
    """Rotation angle too close to pi for the canonical log chart."""


class RankDeficient(ValueError):
    """Matrix too close to singular to project onto SO(3)."""


def hat(s: np.ndarray) -> np.ndarray:
    x, y, z = s
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


def so3_exp(s) -> np.ndarray:
    """Rodrigues formula for the rotation vector ``s``."""
    s = np.asarray(s, dtype=float)
    th2 = float(s @ s)
    th = np.sqrt(th2)
    W = hat(s)
    if th < SMALL_ANGLE:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` with norm in [0, pi).

    Raises AngleAtPi when the angle is within 1e-9 of pi.
    """
    R = np.asarray(R, dtype=float)
    c = 0.5 * (np.trace(R) - 1.0)
    w = vee(R)  # sin(th) * axis
    sn = np.linalg.norm(w)
    # atan2 keeps accuracy near 0 where acos loses half the digits
    th = np.arctan2(sn, np.clip(c, -1.0, 1.0))
    if np.pi - th < 1e-9:
        raise AngleAtPi(f"rotation angle {th!r} is within 1e-9 of pi")
    if th < SMALL_ANGLE:
        return w * (1.0 + th * th / 6.0)
    if th < 3.0:
        return w * (th / sn)
    # close to pi sin(th) is tiny; recover the axis from the symmetric part
    B = 0.5 * (R + R.T) - c * np.eye(3)  # (1 - c) * axis axis^T
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.linalg.norm(B[:, k])
    if axis @ w < 0:
        axis = -axis
    return axis * th


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Frobenius-nearest rotation to ``M`` (always det +1)."""
    M = np.asarray(M, dtype=float)
    U, sv, Vt = np.linalg.svd(M)
    if sv[-1] <= RANK_TOL:
        raise RankDeficient(f"smallest singular value {sv[-1]:.3e} <= {RANK_TOL}")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def geodesic_error(Ra: np.ndarray, Rb: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(np.asarray(Ra).T @ np.asarray(Rb))))


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.linalg.norm(R.T @ R - np.eye(3)) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


@dataclass(frozen=True)
class Pose:
    """Sonar pose in the world frame: ``p_sonar = R^T (p_world - t)``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, s, t) -> "Pose":
        return cls(so3_exp(s), t)

    @property
    def rotvec(self) -> np.ndarray:
        return so3_log(self.rotation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(T[:3, :3], T[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """World points (n,3) or (3,) into this pose's frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation
