"""Two-view point recovery from sonar range/azimuth readings under known poses.

Each azimuth reading confines the point to a plane through the sonar's
z-axis; the two planes meet in a line, and the point is placed on that line
where the two range residuals are smallest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .estimator import CorrespondenceSet, whitened_system
from .geometry import Pose
from .sonar import SonarMeasurement, image_points

MIN_PLANE_ANGLE = 1e-3
MIN_BASELINE = 1e-6
GRID = 400
GATE_FLOOR = 1e-9


class TriangulationError(ValueError):
    pass


class ParallelPlanes(TriangulationError):
    pass


class NoForwardSolution(TriangulationError):
    pass


@dataclass(frozen=True)
class TwoViewObservation:
    pose_a: Pose
    pose_b: Pose
    meas_a: SonarMeasurement
    meas_b: SonarMeasurement


@dataclass(frozen=True)
class TriangulatedPoint:
    point: np.ndarray
    residual_distance: float  # RMS of the two range residuals
    residual_reprojection: float  # worst image-plane residual over the two views
    ambiguous: bool = False  # a second local minimum fits about as well (mirror solution)
    alt_cost: float = float("inf")


def _plane_normal(pose: Pose, m: SonarMeasurement) -> np.ndarray:
    # y - tan(theta) x = 0 in the sonar frame
    n = pose.rotation[:, 1] - m.azimuth_tangent * pose.rotation[:, 0]
    return n / np.linalg.norm(n)


def _image_residual(pose: Pose, m: SonarMeasurement, p: np.ndarray) -> float:
    q = pose.to_local(p)
    rho = np.hypot(q[0], q[1])
    d = np.linalg.norm(q)
    pred = np.array([d * q[0] / rho, d * q[1] / rho]) if rho > 0 else np.array([d, 0.0])
    obs = image_points(np.array([m.distance]), np.array([m.azimuth_tangent]), np.array([m.cos_sign]))[0]
    return float(np.linalg.norm(pred - obs))


def _newton_polish(lam, p0, u, centres, ranges, lo, hi, iters: int = 8) -> float:
    """Newton on the derivative of the range cost; the bounded search stalls near 1e-8."""
    for _ in range(iters):
        g = H = 0.0
        for t, d in zip(centres, ranges):
            v = p0 + lam * u - t
            r = np.linalg.norm(v)
            r1 = (u @ v) / r
            r2 = (1.0 - r1 * r1) / r
            g += -2.0 * (d - r) * r1
            H += 2.0 * (r1 * r1 - (d - r) * r2)
        if H <= 0:
            break
        nxt = lam - g / H
        if not lo <= nxt <= hi:
            break
        if abs(nxt - lam) < 1e-15 * max(1.0, abs(lam)):
            lam = nxt
            break
        lam = nxt
    return lam


def triangulate_two_view(obs: TwoViewObservation, tie_tol: float = 1e-8) -> TriangulatedPoint:
    """Plane-line intersection, then 1-D range fit along the line.

    All local minima of the range cost along the line are located on a grid
    and polished with a bounded scalar minimiser (xatol 1e-12); candidates
    behind either sonar are dropped. ``ambiguous`` is set when the runner-up
    cost is within ``tie_tol`` (m^2) of the best one.
    """
    pa, pb, ma, mb = obs.pose_a, obs.pose_b, obs.meas_a, obs.meas_b
    ta, tb = pa.translation, pb.translation
    if np.linalg.norm(ta - tb) <= MIN_BASELINE:
        raise ParallelPlanes("baseline is below 1e-6 m")
    na, nb = _plane_normal(pa, ma), _plane_normal(pb, mb)
    u = np.cross(na, nb)
    s = np.linalg.norm(u)
    if np.arcsin(min(s, 1.0)) <= MIN_PLANE_ANGLE:
        raise ParallelPlanes(f"azimuth planes are parallel within {MIN_PLANE_ANGLE} rad")
    u /= s
    N = np.vstack([na, nb])
    mid = 0.5 * (ta + tb)
    c = np.array([na @ ta, nb @ tb])
    p0 = mid + N.T @ np.linalg.solve(N @ N.T, c - N @ mid)
    da, db = ma.distance, mb.distance

    def cost(lam):
        p = p0 + lam * u
        return (da - np.linalg.norm(p - ta)) ** 2 + (db - np.linalg.norm(p - tb)) ** 2

    half = 2.0 * max(da, db) + np.linalg.norm(p0 - mid)
    grid = np.linspace(-half, half, GRID)
    P = p0 + grid[:, None] * u
    F = (da - np.linalg.norm(P - ta, axis=1)) ** 2 + (db - np.linalg.norm(P - tb, axis=1)) ** 2
    idx = [i for i in range(1, GRID - 1) if F[i] <= F[i - 1] and F[i] <= F[i + 1]]
    cands = []
    for i in idx:
        r = minimize_scalar(cost, bounds=(grid[i - 1], grid[i + 1]), method="bounded", options={"xatol": 1e-12})
        lam = _newton_polish(r.x, p0, u, (ta, tb), (da, db), grid[i - 1], grid[i + 1])
        p = p0 + lam * u
        if pa.to_local(p)[0] > 0 and pb.to_local(p)[0] > 0:
            cands.append((float(cost(lam)), p))
    if not cands:
        raise NoForwardSolution("range minimiser lies behind the sonars")
    cands.sort(key=lambda c: c[0])
    # the bounded search can land on the same basin twice from adjacent grid cells
    distinct = [cands[0]] + [c for c in cands[1:] if np.linalg.norm(c[1] - cands[0][1]) > 1e-6]
    best_f, best_p = distinct[0]
    alt = distinct[1][0] if len(distinct) > 1 else float("inf")
    rd = float(np.sqrt(best_f / 2.0))
    rr = max(_image_residual(pa, ma, best_p), _image_residual(pb, mb, best_p))
    return TriangulatedPoint(best_p, rd, rr, alt - best_f <= tie_tol, alt)


def gate_point(p: TriangulatedPoint, threshold: float) -> bool:
    return p.residual_reprojection <= threshold


def default_gate_threshold(sigma_d: float, sigma_theta: float, max_distance: float) -> float:
    """3x the larger per-axis image noise: range sigma or azimuth sigma times range.

    Floored at ``GATE_FLOOR`` so noise-free data is not rejected for roundoff.
    """
    return max(3.0 * max(sigma_d, sigma_theta * max_distance), GATE_FLOOR)


def point_covariance(
    obs: TwoViewObservation,
    point: np.ndarray,
    sigma_d: float,
    sigma_theta: float,
    pose_cov_a: np.ndarray | None = None,
    pose_cov_b: np.ndarray | None = None,
) -> np.ndarray:
    """First-order 3x3 covariance of :func:`triangulate_two_view`'s output.

    The estimate satisfies both azimuth readings exactly and fits the ranges
    in least squares, so the linearised map from whitened readings to the
    point is a constrained least-squares solve. Optional 6x6 pose
    covariances (ordering ``[s, t]``, right-perturbed rotation) are pushed
    through the same map.
    """
    p = np.atleast_2d(point)
    jp, jx = [], []
    for pose, m in ((obs.pose_a, obs.meas_a), (obs.pose_b, obs.meas_b)):
        corr = CorrespondenceSet(p, [m.distance], [m.azimuth_tangent], [m.cos_sign])
        _, J = whitened_system(corr, pose, sigma_d, sigma_theta)
        jp.append(-J[:, 3:])
        jx.append(J)
    Jp = np.vstack(jp)  # rows: d_a, tan_a, d_b, tan_b
    A, B = Jp[0::2], Jp[1::2]
    _, sv, Vt = np.linalg.svd(B)
    if sv[-1] <= 1e-12 * sv[0]:
        return np.full((3, 3), np.inf)
    Bp = np.linalg.pinv(B)
    u = Vt[2]  # direction of the plane-intersection line
    Au = A @ u
    if Au @ Au <= 1e-24 * (A * A).sum():
        return np.full((3, 3), np.inf)
    # dp = Bp e_tan + u (Au . (e_d - A Bp e_tan)) / |Au|^2
    Md = np.outer(u, Au) / (Au @ Au)
    Mt = Bp - Md @ A @ Bp
    M = np.zeros((3, 4))
    M[:, 0::2], M[:, 1::2] = Md, Mt
    cov = M @ M.T
    for k, pc in enumerate((pose_cov_a, pose_cov_b)):
        if pc is not None:
            T = M[:, 2 * k : 2 * k + 2] @ jx[k]
            cov = cov + T @ pc @ T.T
    return cov


def point_std(obs: TwoViewObservation, point: np.ndarray, sigma_d: float, sigma_theta: float, pose_cov_a=None, pose_cov_b=None) -> float:
    """sqrt(trace) of :func:`point_covariance`."""
    return float(np.sqrt(np.trace(point_covariance(obs, point, sigma_d, sigma_theta, pose_cov_a, pose_cov_b))))
