import numpy as np
import pytest
from scipy.optimize import least_squares

from bestanp.geometry import Pose, so3_exp
from bestanp.odometry import OdometryConfig, generate_trajectory, observe, scatter_scene
from bestanp.sonar import FovSpec, NoiseModel, SonarMeasurement, apply_noise, project_ideal
from bestanp.triangulation import (
    NoForwardSolution,
    ParallelPlanes,
    TriangulatedPoint,
    TwoViewObservation,
    default_gate_threshold,
    gate_point,
    point_covariance,
    triangulate_two_view,
)

POINT = np.array([3.0, 0.4, 0.35])
CENTRE = np.array([3.0, 0.0, 0.0])


def orbit_pose(yaw, lift=0.3, roll=0.0):
    # swing the origin pose about the vertical through CENTRE, then roll about the sonar x-axis
    Rz = so3_exp([0, 0, yaw])
    return Pose(Rz @ so3_exp([roll, 0, 0]), CENTRE + Rz @ (-CENTRE) + [0, 0, lift])


ROLLED = orbit_pose(np.deg2rad(30), roll=np.deg2rad(20))


def views(pa, pb, p, noise=None, rng=None):
    ma, _ = project_ideal(pa, p)
    mb, _ = project_ideal(pb, p)
    if noise is not None:
        ma, mb = apply_noise(ma, noise, rng), apply_noise(mb, noise, rng)
    return TwoViewObservation(pa, pb, ma, mb)


def test_noise_free_30deg_yaw():
    obs = views(Pose.identity(), orbit_pose(np.deg2rad(30)), POINT)
    tp = triangulate_two_view(obs)
    assert np.linalg.norm(tp.point - POINT) < 1e-9
    assert tp.residual_distance < 1e-9 and tp.residual_reprojection < 1e-9


def test_reprojection_reproduces_measurements():
    obs = views(Pose.identity(), orbit_pose(np.deg2rad(20)), POINT)
    p = triangulate_two_view(obs).point
    for pose, m in ((obs.pose_a, obs.meas_a), (obs.pose_b, obs.meas_b)):
        q, _ = project_ideal(pose, p)
        assert abs(q.distance - m.distance) < 1e-9 and abs(q.azimuth_tangent - m.azimuth_tangent) < 1e-9


def _planar_case():
    p = np.array([3.0, 0.5, 0.0])
    return p, triangulate_two_view(views(Pose.identity(), orbit_pose(np.deg2rad(30), lift=0.0), p))


def test_zero_elevation_point_same_height_loose():
    p, tp = _planar_case()
    assert np.linalg.norm(tp.point[:2] - p[:2]) < 1e-12
    assert abs(tp.point[2]) < 1e-6


@pytest.mark.xfail(
    strict=True,
    reason="both range spheres touch the intersection line tangentially, so the range cost is quartic "
    "in z and float roundoff in the distances leaves z undetermined at the sqrt(eps * range) ~ 3e-8 level",
)
def test_zero_elevation_point_same_height():
    p, tp = _planar_case()
    assert abs(tp.point[2] - p[2]) < 1e-9


def _oracle(obs, sd, st):
    # full four-residual ML triangulation: coarse grid, then local refinement
    def res(p):
        out = []
        for pose, m in ((obs.pose_a, obs.meas_a), (obs.pose_b, obs.meas_b)):
            q = pose.to_local(p)
            out += [(m.distance - np.linalg.norm(q)) / sd, (m.azimuth_tangent - q[1] / q[0]) / st]
        return np.array(out)

    offs = np.linspace(-0.3, 0.3, 7)
    grid = POINT + np.stack(np.meshgrid(offs, offs, offs), -1).reshape(-1, 3)
    start = grid[int(np.argmin([res(g) @ res(g) for g in grid]))]
    return least_squares(res, start, xtol=1e-15, ftol=1e-15).x


def test_noisy_against_bruteforce_oracle():
    rng = np.random.default_rng(0)
    nm = NoiseModel(1e-3, 1e-3)
    mine, ref = [], []
    for _ in range(200):
        obs = views(Pose.identity(), ROLLED, POINT, nm, rng)
        mine.append(np.linalg.norm(triangulate_two_view(obs).point - POINT))
        ref.append(np.linalg.norm(_oracle(obs, 1e-3, 1e-3) - POINT))
    assert np.median(mine) <= 3 * np.median(ref)


def test_error_decreases_with_baseline():
    nm = NoiseModel(1e-3, 1e-3)
    meds = []
    for deg in (5, 10, 20, 30, 45):
        rng = np.random.default_rng(deg)
        errs = [
            np.linalg.norm(triangulate_two_view(views(Pose.identity(), orbit_pose(np.deg2rad(deg)), POINT, nm, rng)).point - POINT)
            for _ in range(500)
        ]
        meds.append(np.median(errs))
    assert all(a > b for a, b in zip(meds, meds[1:]))


def test_parallel_planes():
    pb = Pose(np.eye(3), [0.0, 0.0, 0.5])  # pure heave keeps the azimuth plane
    p = np.array([3.0, 0.4, 0.2])
    with pytest.raises(ParallelPlanes):
        triangulate_two_view(views(Pose.identity(), pb, p))


def test_tiny_baseline():
    with pytest.raises(ParallelPlanes):
        triangulate_two_view(views(Pose.identity(), Pose(so3_exp([0, 0, 0.3]), [1e-8, 0, 0]), POINT))


def test_no_forward_solution():
    # readings of a point behind both sonars, with the cosine sign dropped
    pa, pb = Pose.identity(), orbit_pose(np.deg2rad(30))
    q = np.array([-3.0, 0.4, 0.35])
    ma, mb = project_ideal(pa, q)[0], project_ideal(pb, q)[0]
    assert ma.cos_sign < 0 and mb.cos_sign < 0
    obs = TwoViewObservation(pa, pb, SonarMeasurement(ma.distance, ma.azimuth_tangent), SonarMeasurement(mb.distance, mb.azimuth_tangent))
    with pytest.raises(NoForwardSolution):
        triangulate_two_view(obs)


def test_gate_examples():
    assert gate_point(TriangulatedPoint(np.zeros(3), 0.0, 0.0), 1e-6)
    assert not gate_point(TriangulatedPoint(np.zeros(3), 0.0, 5e-3), 3e-3)


def test_default_threshold():
    assert default_gate_threshold(1e-3, 1e-3, 6.0) == pytest.approx(0.018)
    assert default_gate_threshold(0.0, 0.0, 6.0) > 0


def _gate_population(corrupt: bool):
    cfg = OdometryConfig()
    tr = generate_trajectory("eight")
    scene = scatter_scene(tr, cfg.fov, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    passed = []
    for k in range(0, 120, 3):
        a = observe(scene, tr.poses[k], cfg, rng)
        b = observe(scene, tr.poses[k + 1], cfg, rng)
        for pid in sorted(set(a) & set(b)):
            ma, mb = a[pid], b[pid]
            if corrupt:
                ma = SonarMeasurement(ma.distance + rng.choice([-1, 1]) * 10 * cfg.noise.sigma_d, ma.azimuth_tangent, ma.cos_sign)
            try:
                tp = triangulate_two_view(TwoViewObservation(tr.poses[k], tr.poses[k + 1], ma, mb))
            except Exception:
                continue
            passed.append(gate_point(tp, cfg.threshold))
    return np.mean(passed)


def test_gate_passes_inliers():
    assert _gate_population(corrupt=False) >= 0.95


@pytest.mark.xfail(
    strict=True,
    reason="two views give four readings for three unknowns; a 10-sigma range error is mostly absorbed "
    "into the point, so its post-fit residual stays below any threshold that keeps 95% of inliers",
)
def test_gate_rejects_corrupted():
    assert _gate_population(corrupt=True) <= 0.05


def test_point_covariance_matches_monte_carlo():
    # first-order covariance, so check it where the linearisation holds
    pa, pb = Pose.identity(), ROLLED
    nm = NoiseModel(1e-4, 1e-4)
    rng = np.random.default_rng(3)
    pts = np.array([triangulate_two_view(views(pa, pb, POINT, nm, rng)).point for _ in range(4000)])
    C = point_covariance(views(pa, pb, POINT), POINT, 1e-4, 1e-4)
    assert np.trace(np.cov(pts.T)) == pytest.approx(np.trace(C), rel=0.1)


def test_point_covariance_pose_term():
    # exact readings, noisy second pose: spread comes from the pose covariance alone
    pa, pb = Pose.identity(), ROLLED
    obs0 = views(pa, pb, POINT)
    Sig = np.diag([1e-4**2] * 3 + [2e-4**2] * 3)
    rng = np.random.default_rng(4)
    pts = []
    for _ in range(3000):
        x = rng.multivariate_normal(np.zeros(6), Sig)
        pb_noisy = Pose(pb.rotation @ so3_exp(x[:3]), pb.translation + x[3:])
        pts.append(triangulate_two_view(TwoViewObservation(pa, pb_noisy, obs0.meas_a, obs0.meas_b)).point)
    C = point_covariance(obs0, POINT, 1e-9, 1e-9, None, Sig)
    assert np.trace(np.cov(np.array(pts).T)) == pytest.approx(np.trace(C), rel=0.1)
