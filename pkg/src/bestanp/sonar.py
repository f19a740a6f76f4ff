"""Forward-looking sonar observation model.

A sonar-frame point ``(x, y, z)`` is observed as distance ``d = |p|`` and
azimuth ``theta = atan(y / x)``; elevation is lost. The image plane keeps
``(d cos theta, d sin theta)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import Pose

AZIMUTH_GUARD = 1e-12


class AzimuthSingular(ValueError):
    """Point lies (numerically) in the sonar's y-z plane, azimuth undefined."""


@dataclass(frozen=True)
class SphericalCoords:
    distance: float
    azimuth: float
    elevation: float

    def to_cartesian(self) -> np.ndarray:
        d, th, ph = self.distance, self.azimuth, self.elevation
        return np.array([d * np.cos(ph) * np.cos(th), d * np.cos(ph) * np.sin(th), d * np.sin(ph)])


@dataclass(frozen=True)
class SonarMeasurement:
    distance: float
    azimuth_tangent: float
    cos_sign: int = 1

    @classmethod
    def from_angle(cls, distance: float, theta: float) -> "SonarMeasurement":
        c = np.cos(theta)
        return cls(float(distance), float(np.tan(theta)), 1 if c >= 0 else -1)

    @property
    def azimuth(self) -> float:
        """Angle consistent with the stored tangent and cosine sign."""
        th = float(np.arctan(self.azimuth_tangent))
        if self.cos_sign < 0:
            th += np.pi if th <= 0 else -np.pi
        return th

    def image_point(self) -> "ImagePoint":
        th = self.azimuth
        return ImagePoint(self.distance * np.cos(th), self.distance * np.sin(th))


@dataclass(frozen=True)
class ImagePoint:
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class FovSpec:
    max_distance: float = 6.0
    azimuth_halfwidth: float = np.deg2rad(30.0)
    elevation_halfwidth: float = np.deg2rad(10.0)
    min_distance: float = 0.5  # lower end of the scene generator's radial law

    def __post_init__(self):
        if min(self.max_distance, self.azimuth_halfwidth, self.elevation_halfwidth) <= 0:
            raise ValueError("FOV extents must be positive")
        if self.azimuth_halfwidth >= np.pi / 2:
            raise ValueError("azimuth half-width must be below pi/2")
        if not 0 <= self.min_distance < self.max_distance:
            raise ValueError("need 0 <= min_distance < max_distance")

    @classmethod
    def from_degrees(cls, max_distance=6.0, azimuth_deg=30.0, elevation_deg=10.0, min_distance=0.5):
        return cls(max_distance, np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg), min_distance)


class NoiseMechanism(str, enum.Enum):
    ON_TANGENT = "on_tangent"
    ON_ANGLE = "on_angle"


@dataclass(frozen=True)
class NoiseModel:
    sigma_d: float = 1e-3
    sigma_theta: float = 1e-3
    mechanism: NoiseMechanism = NoiseMechanism.ON_TANGENT
    seed: int = 0

    def __post_init__(self):
        if self.sigma_d < 0 or self.sigma_theta < 0:
            raise ValueError("noise standard deviations must be non-negative")
        object.__setattr__(self, "mechanism", NoiseMechanism(self.mechanism))


def to_sonar_frame(pose: Pose, world_point) -> np.ndarray:
    return pose.to_local(world_point)


def spherical_of(sonar_point) -> SphericalCoords:
    x, y, z = np.asarray(sonar_point, dtype=float)
    if abs(x) <= AZIMUTH_GUARD:
        raise AzimuthSingular(f"|x| = {abs(x):.3e} at or below {AZIMUTH_GUARD}")
    d = float(np.sqrt(x * x + y * y + z * z))
    theta = float(np.arctan2(y, x))
    phi = float(np.arcsin(z / d))
    return SphericalCoords(d, theta, phi)


def project_ideal(pose: Pose, world_point) -> tuple[SonarMeasurement, ImagePoint]:
    p = to_sonar_frame(pose, world_point)
    if abs(p[0]) <= AZIMUTH_GUARD:
        raise AzimuthSingular(f"|x| = {abs(p[0]):.3e} at or below {AZIMUTH_GUARD}")
    d = float(np.linalg.norm(p))
    rho = float(np.hypot(p[0], p[1]))
    meas = SonarMeasurement(d, float(p[1] / p[0]), 1 if p[0] > 0 else -1)
    # d cos(theta), d sin(theta) with theta the in-plane angle of (x, y)
    if rho == 0.0:
        return meas, ImagePoint(d, 0.0)
    return meas, ImagePoint(d * p[0] / rho, d * p[1] / rho)


def project_points(pose: Pose, world_points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised noise-free projection: distances, tangents, cos signs."""
    P = pose.to_local(world_points)
    x = P[:, 0]
    if np.any(np.abs(x) <= AZIMUTH_GUARD):
        raise AzimuthSingular("at least one point has a singular azimuth")
    return np.linalg.norm(P, axis=1), P[:, 1] / x, np.where(x > 0, 1, -1)


def image_points(distances: np.ndarray, tangents: np.ndarray, cos_signs: np.ndarray) -> np.ndarray:
    """Image-plane coordinates (n, 2) from distance/tangent/cos-sign arrays."""
    c = cos_signs / np.sqrt(1.0 + tangents**2)
    return np.column_stack([distances * c, distances * c * tangents])


def in_fov(pose: Pose, world_point, fov: FovSpec) -> bool:
    try:
        sph = spherical_of(to_sonar_frame(pose, world_point))
    except AzimuthSingular:
        return False
    return (
        sph.distance <= fov.max_distance
        and abs(sph.azimuth) <= fov.azimuth_halfwidth
        and abs(sph.elevation) <= fov.elevation_halfwidth
    )


def in_fov_mask(pose: Pose, world_points: np.ndarray, fov: FovSpec) -> np.ndarray:
    P = pose.to_local(np.atleast_2d(world_points))
    x, y, z = P.T
    d = np.linalg.norm(P, axis=1)
    ok = np.abs(x) > AZIMUTH_GUARD
    with np.errstate(divide="ignore", invalid="ignore"):
        th = np.arctan2(y, x)
        ph = np.arcsin(np.clip(z / np.where(d > 0, d, 1.0), -1, 1))
    return ok & (d <= fov.max_distance) & (np.abs(th) <= fov.azimuth_halfwidth) & (np.abs(ph) <= fov.elevation_halfwidth)


def perturb(
    distances: np.ndarray,
    tangents: np.ndarray,
    cos_signs: np.ndarray,
    model: NoiseModel,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array form of :func:`apply_noise`.

    Draws all distance noise first, then all azimuth noise, so the stream
    consumption depends only on the number of points.
    """
    n = len(distances)
    ed = rng.standard_normal(n) * model.sigma_d
    et = rng.standard_normal(n) * model.sigma_theta
    d = distances + ed
    if model.mechanism is NoiseMechanism.ON_TANGENT:
        # the perturbed tangent keeps the ideal quadrant
        return d, tangents + et, cos_signs.copy()
    theta = np.arctan(tangents)
    theta = np.where(cos_signs < 0, theta + np.where(theta <= 0, np.pi, -np.pi), theta)
    theta = theta + et
    return d, np.tan(theta), np.where(np.cos(theta) >= 0, 1, -1)


def apply_noise(ideal: SonarMeasurement, model: NoiseModel, rng: np.random.Generator) -> SonarMeasurement:
    d, t, c = perturb(
        np.array([ideal.distance]), np.array([ideal.azimuth_tangent]), np.array([ideal.cos_sign]), model, rng
    )
    return SonarMeasurement(float(d[0]), float(t[0]), int(c[0]))


def reprojection_error(pose: Pose, world_point, observed: ImagePoint) -> float:
    _, predicted = project_ideal(pose, world_point)
    return float(np.hypot(predicted.x - observed.x, predicted.y - observed.y))


def average_reprojection_error(pose: Pose, world_points: np.ndarray, observed: np.ndarray) -> float:
    """ARE = sqrt(sum of squared image residuals) / N, in metres."""
    d, tn, cs = project_points(pose, world_points)
    q = image_points(d, tn, cs)
    return float(np.sqrt(np.sum((q - observed) ** 2)) / len(q))
