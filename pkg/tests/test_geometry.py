import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bestanp.geometry import (
    AngleAtPi,
    Pose,
    RankDeficient,
    geodesic_error,
    is_rotation,
    project_to_so3,
    so3_exp,
    so3_log,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def random_rotation(rng):
    v = rng.standard_normal(3)
    return so3_exp(v / np.linalg.norm(v) * rng.uniform(0, 3.0))


def test_exp_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_z():
    R = so3_exp([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert is_rotation(R)


def test_exp_log_roundtrip_norm_03():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.standard_normal(3)
        s *= 0.3 / np.linalg.norm(s)
        assert np.allclose(so3_log(so3_exp(s)), s, atol=1e-10)


def test_log_examples():
    assert np.allclose(so3_log(np.eye(3)), 0.0)
    assert np.allclose(so3_log(so3_exp([0, 0, np.pi / 2])), [0, 0, np.pi / 2], atol=1e-15)


def test_log_roundtrip_1000():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        s = rng.standard_normal(3)
        s *= rng.uniform(1e-6, 3.0) / np.linalg.norm(s)
        worst = max(worst, np.abs(so3_log(so3_exp(s)) - s).max())
    assert worst < 1e-9


def test_log_at_pi_raises():
    with pytest.raises(AngleAtPi):
        so3_log(so3_exp([np.pi, 0, 0]))


def test_small_angle_branch_continuous():
    # Taylor branch and closed form agree on both sides of the switch
    for th in (5e-9, 2e-8, 1e-6):
        s = np.array([th, -th, 0.5 * th])
        assert np.allclose(so3_log(so3_exp(s)), s, rtol=1e-9, atol=0)


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_exp_log_property(s):
    if np.linalg.norm(s) >= np.pi - 1e-3:
        s = s / np.linalg.norm(s) * 3.0
    R = so3_exp(s)
    assert is_rotation(R)
    assert np.allclose(so3_log(R), s, atol=1e-9)


def test_project_idempotent_and_scaling():
    rng = np.random.default_rng(3)
    R = random_rotation(rng)
    assert np.allclose(project_to_so3(R), R, atol=1e-12)
    assert np.allclose(project_to_so3(2 * np.eye(3)), np.eye(3), atol=1e-15)


def test_project_reflection_gives_det_plus_one():
    M = np.diag([1.0, 1.0, -1.0]) @ random_rotation(np.random.default_rng(4))
    R = project_to_so3(M)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_project_rank_deficient():
    with pytest.raises(RankDeficient):
        project_to_so3(np.diag([1.0, 1.0, 0.0]))


def test_project_is_nearest_against_random_candidates():
    rng = np.random.default_rng(5)
    R = random_rotation(rng)
    E = rng.standard_normal((3, 3))
    M = R + 1e-3 * E / np.linalg.norm(E)
    P = project_to_so3(M)
    assert geodesic_error(P, R) < 2e-3
    best = np.linalg.norm(P - M)
    cands = [so3_exp(rng.normal(scale=2e-3, size=3)) @ P for _ in range(10_000)]
    assert min(np.linalg.norm(C - M) for C in cands) >= best - 1e-15


def test_geodesic_examples():
    R = random_rotation(np.random.default_rng(6))
    assert geodesic_error(R, R) < 1e-12
    assert np.isclose(geodesic_error(np.eye(3), so3_exp([0, 0, np.pi / 2])), np.pi / 2)


def test_geodesic_matches_trace_formula():
    rng = np.random.default_rng(7)
    for _ in range(200):
        Ra, Rb = random_rotation(rng), random_rotation(rng)
        c = np.clip((np.trace(Ra.T @ Rb) - 1) / 2, -1, 1)
        if c < -0.99:
            continue  # acos is ill-conditioned near pi
        assert abs(geodesic_error(Ra, Rb) - np.arccos(c)) < 1e-9


def test_geodesic_symmetric_and_triangle():
    rng = np.random.default_rng(8)
    for _ in range(300):
        A, B, C = (so3_exp(rng.normal(scale=0.5, size=3)) for _ in range(3))
        assert np.isclose(geodesic_error(A, B), geodesic_error(B, A), atol=1e-12)
        assert geodesic_error(A, C) <= geodesic_error(A, B) + geodesic_error(B, C) + 1e-9


def test_pose_inverse_and_compose():
    rng = np.random.default_rng(9)
    T = Pose(random_rotation(rng), rng.normal(size=3))
    I = T.compose(T.inverse())
    assert np.allclose(I.rotation, np.eye(3)) and np.allclose(I.translation, 0)
    p = rng.normal(size=3)
    assert np.allclose(T.to_world(T.to_local(p)), p, atol=1e-12)
