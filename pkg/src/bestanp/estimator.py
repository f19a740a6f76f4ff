"""Bi-step closed-form AnP estimator with bias elimination and one Gauss-Newton step.

Step one recovers the sonar position (and the distance-noise variance) from
distances alone by a linear least-squares sphere intersection. Step two uses
azimuth tangents and the estimated position to get the first two columns of
the rotation from the null vector of a bias-corrected 6x6 matrix. A single
Gauss-Newton step on the whitened ML cost then brings the estimate to the
efficiency of the ML estimator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Pose, hat, project_to_so3, so3_exp
from .sonar import SonarMeasurement

VARIANCE_FLOOR = 1e-12
COPLANAR_TOL = 1e-6
DEGENERATE_Q_TOL = 1e-14
EIGENGAP_TOL = 1e-12
MAX_NORMAL_COND = 1e12
MIN_POINTS = 6


class EstimationError(ValueError):
    """Base class for estimator failures; ``stage`` names the pipeline step."""

    stage = "estimate"

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class TooFewPoints(EstimationError):
    stage = "input"


class CoplanarPoints(EstimationError):
    stage = "translation"


class DegenerateQ(EstimationError):
    stage = "sigma_theta"


class EigengapDegenerate(EstimationError):
    stage = "rotation"


class SignVoteTie(EstimationError):
    stage = "rotation"


class SingularNormalMatrix(EstimationError):
    stage = "gauss_newton"


class AzimuthDenominatorVanishes(EstimationError):
    stage = "gauss_newton"


@dataclass(frozen=True)
class CorrespondenceSet:
    """World points paired with (distance, azimuth tangent, cos sign) readings."""

    world_points: np.ndarray
    distances: np.ndarray
    tangents: np.ndarray
    cos_signs: np.ndarray = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.world_points, dtype=float))
        d = np.asarray(self.distances, dtype=float).reshape(-1)
        tn = np.asarray(self.tangents, dtype=float).reshape(-1)
        cs = np.ones(len(d), dtype=int) if self.cos_signs is None else np.asarray(self.cos_signs).astype(int).reshape(-1)
        if P.shape[1:] != (3,):
            raise ValueError(f"world_points must be (n, 3), got {P.shape}")
        if not len(P) == len(d) == len(tn) == len(cs):
            raise ValueError("points and measurements must have equal length")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(d)) and np.all(np.isfinite(tn))):
            raise ValueError("non-finite correspondence data")
        for name, v in (("world_points", P), ("distances", d), ("tangents", tn), ("cos_signs", cs)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def from_measurements(cls, world_points, measurements: Sequence[SonarMeasurement]) -> "CorrespondenceSet":
        return cls(
            world_points,
            [m.distance for m in measurements],
            [m.azimuth_tangent for m in measurements],
            [m.cos_sign for m in measurements],
        )

    @classmethod
    def from_angles(cls, world_points, distances, thetas) -> "CorrespondenceSet":
        thetas = np.asarray(thetas, dtype=float)
        return cls(world_points, distances, np.tan(thetas), np.where(np.cos(thetas) >= 0, 1, -1))

    @property
    def n(self) -> int:
        return len(self.distances)

    @property
    def measurements(self) -> list[SonarMeasurement]:
        return [SonarMeasurement(float(d), float(t), int(c)) for d, t, c in zip(self.distances, self.tangents, self.cos_signs)]

    @property
    def thetas(self) -> np.ndarray:
        th = np.arctan(self.tangents)
        return np.where(self.cos_signs < 0, th + np.where(th <= 0, np.pi, -np.pi), th)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.world_points[idx], self.distances[idx], self.tangents[idx], self.cos_signs[idx])


@dataclass(frozen=True)
class TranslationEstimate:
    t_hat: np.ndarray
    sigma_d_sq_hat: float
    design_matrix_condition: float
    sigma_d_sq_raw: float = 0.0  # before clamping at zero


@dataclass(frozen=True)
class RotationEstimate:
    r_hat: np.ndarray  # stacked first two rotation columns, |r|^2 = 2
    R_be: np.ndarray
    sigma_theta_sq_hat: float
    smallest_eigenvalue: float
    sign_agreement: float = 1.0  # fraction of points voting for the chosen sign


@dataclass
class GnWorkspace:
    residual: np.ndarray
    jacobian: np.ndarray
    step: np.ndarray
    cost_before: float = float("nan")
    cost_after: float = float("nan")


@dataclass
class EstimateReport:
    t_be: TranslationEstimate
    r_be: RotationEstimate
    pose_gn: Pose
    ml_cost_initial: float
    ml_cost_final: float
    gn_iterations: int
    sigma_d_used: float
    sigma_theta_used: float
    workspace: GnWorkspace | None = field(default=None, repr=False)

    @property
    def pose_be(self) -> Pose:
        return Pose(self.r_be.R_be, self.t_be.t_hat)

    @property
    def pose(self) -> Pose:
        return self.pose_gn

    @property
    def cost_decreased(self) -> bool:
        return self.ml_cost_final <= self.ml_cost_initial + 1e-12


# ---------------------------------------------------------------- translation


def _check_coplanarity(P: np.ndarray) -> float:
    sv = np.linalg.svd(np.column_stack([P, np.ones(len(P))]), compute_uv=False)
    if sv[-1] <= COPLANAR_TOL * sv[0]:
        raise CoplanarPoints(f"points are (nearly) coplanar: sigma_min/sigma_max = {sv[-1] / sv[0]:.3e}")
    return float(sv[0] / sv[-1])


def estimate_translation(corr: CorrespondenceSet) -> TranslationEstimate:
    """Bias-eliminated sphere intersection; also returns the distance-noise variance."""
    if corr.n < 4:
        raise TooFewPoints(f"translation needs n >= 4 points, got {corr.n}", stage="translation")
    P = corr.world_points
    _check_coplanarity(P)
    A = np.column_stack([-2.0 * P, np.ones(corr.n)])
    b = corr.distances**2 - np.einsum("ij,ij->i", P, P)
    x, *_, sv = np.linalg.lstsq(A, b, rcond=None)
    t = x[:3]
    raw = float(x[3] - t @ t)
    return TranslationEstimate(t, max(0.0, raw), float(sv[0] / sv[-1]), raw)


# ------------------------------------------------------------------- rotation


def _q_and_s(corr: CorrespondenceSet, t_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    U = corr.world_points - t_hat
    B = np.column_stack([corr.tangents[:, None] * U, -U])
    n = corr.n
    Q = B.T @ B / n
    S = np.zeros((6, 6))
    S[:3, :3] = U.T @ U / n
    return Q, S


def _sigma_theta_from(Q: np.ndarray, S: np.ndarray) -> float:
    lam, V = np.linalg.eigh(Q)
    tol = DEGENERATE_Q_TOL * np.trace(Q)
    if lam[1] <= tol:
        raise DegenerateQ(f"Q has a multi-dimensional null space (eigenvalues {lam[0]:.3e}, {lam[1]:.3e})")
    if lam[0] <= tol:
        # noise-free limit: lambda_max(Q^-1 S) diverges
        return 0.0
    Wh = V / np.sqrt(lam)  # Q^{-1/2} = Wh V^T
    M = Wh.T @ S @ Wh
    lmax = float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
    if not np.isfinite(lmax) or lmax <= 0:
        raise DegenerateQ(f"lambda_max(Q^-1 S) = {lmax!r}")
    return 1.0 / lmax


def estimate_sigma_theta(corr: CorrespondenceSet, t_hat) -> float:
    """Azimuth-tangent noise variance as ``1 / lambda_max(Q^-1 S)``."""
    if corr.n < MIN_POINTS:
        raise TooFewPoints(f"azimuth variance needs n >= {MIN_POINTS} points, got {corr.n}", stage="sigma_theta")
    Q, S = _q_and_s(corr, np.asarray(t_hat, dtype=float))
    return _sigma_theta_from(Q, S)


def _fix_sign(r: np.ndarray, corr: CorrespondenceSet, t_hat: np.ndarray, rule: str) -> tuple[np.ndarray, float]:
    h = (corr.world_points - t_hat) @ r[:3]  # predicted sonar-frame x
    agree = np.sign(h) == corr.cos_signs
    if rule == "first":
        return (r, 1.0) if agree[0] else (-r, 1.0)
    if rule != "majority":
        raise ValueError(f"unknown sign rule {rule!r}")
    k = int(np.count_nonzero(agree))
    if 2 * k == corr.n:
        raise SignVoteTie(f"sign vote split {k}/{corr.n}")
    if 2 * k < corr.n:
        return -r, 1.0 - k / corr.n
    return r, k / corr.n


def estimate_rotation(
    corr: CorrespondenceSet,
    t_hat,
    sigma_theta_sq: float,
    *,
    sign_rule: str = "majority",
    Q: np.ndarray | None = None,
    S: np.ndarray | None = None,
) -> RotationEstimate:
    """Rotation from the smallest eigenvector of the bias-corrected matrix ``Q - sigma^2 S``.

    Pass ``sigma_theta_sq=0`` to disable the bias correction.
    """
    if corr.n < MIN_POINTS:
        raise TooFewPoints(f"rotation needs n >= {MIN_POINTS} points, got {corr.n}", stage="rotation")
    t_hat = np.asarray(t_hat, dtype=float)
    if Q is None or S is None:
        Q, S = _q_and_s(corr, t_hat)
    Qbe = Q - sigma_theta_sq * S
    lam, V = np.linalg.eigh(0.5 * (Qbe + Qbe.T))
    if lam[1] - lam[0] < EIGENGAP_TOL * np.trace(Q):
        raise EigengapDegenerate(f"two smallest eigenvalues {lam[0]:.3e}, {lam[1]:.3e} are not separated")
    r, frac = _fix_sign(np.sqrt(2.0) * V[:, 0], corr, t_hat, sign_rule)
    r1, r2 = r[:3], r[3:]
    M = np.column_stack([r1, r2, np.cross(r1, r2)])
    return RotationEstimate(r, project_to_so3(M), float(sigma_theta_sq), float(lam[0]), frac)


# -------------------------------------------------------------- Gauss-Newton


def residuals(corr: CorrespondenceSet, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Unwhitened distance and tangent residuals (measured minus predicted)."""
    U = corr.world_points - pose.translation
    W = U @ pose.rotation
    h = W[:, 0]
    if np.any(np.abs(h) <= 1e-9 * np.linalg.norm(U, axis=1)):
        raise AzimuthDenominatorVanishes("a point lies in the sonar's y-z plane under this pose")
    return corr.distances - np.linalg.norm(U, axis=1), corr.tangents - W[:, 1] / h


def whitened_system(
    corr: CorrespondenceSet, pose: Pose, sigma_d: float, sigma_theta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Residual (2n,) and Jacobian (2n, 6) w.r.t. ``[s, t]`` at ``s = 0``.

    Rows alternate distance / azimuth per point. The rotation is perturbed on
    the right, ``R exp(s^)``.
    """
    R = pose.rotation
    U = corr.world_points - pose.translation
    W = U @ R  # sonar-frame coordinates
    h, g = W[:, 0], W[:, 1]
    norm_u = np.linalg.norm(U, axis=1)
    if np.any(np.abs(h) <= 1e-9 * norm_u):
        raise AzimuthDenominatorVanishes("a point lies in the sonar's y-z plane under this pose")
    n = corr.n
    h2 = h * h
    zero = np.zeros(n)
    # d(R^T u)/ds = hat(w): rows give dh/ds and dg/ds
    dh_ds = np.column_stack([zero, -W[:, 2], W[:, 1]])
    dg_ds = np.column_stack([W[:, 2], zero, -W[:, 0]])
    J = np.zeros((2 * n, 6))
    J[0::2, 3:] = U / norm_u[:, None] / sigma_d
    J[1::2, :3] = (g[:, None] * dh_ds - h[:, None] * dg_ds) / h2[:, None] / sigma_theta
    J[1::2, 3:] = (h[:, None] * R[:, 1] - g[:, None] * R[:, 0]) / h2[:, None] / sigma_theta
    r = np.empty(2 * n)
    r[0::2] = (corr.distances - norm_u) / sigma_d
    r[1::2] = (corr.tangents - g / h) / sigma_theta
    return r, J


def _solve_normal(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    H = J.T @ J
    lam = np.linalg.eigvalsh(H)
    if lam[0] <= 0 or lam[-1] / lam[0] > MAX_NORMAL_COND:
        raise SingularNormalMatrix(f"normal matrix condition {lam[-1] / max(lam[0], 1e-300):.3e} exceeds {MAX_NORMAL_COND:.0e}")
    try:
        c = np.linalg.cholesky(H)
        y = np.linalg.solve(c, J.T @ r)
        return np.linalg.solve(c.T, y)
    except np.linalg.LinAlgError:
        return np.linalg.solve(H, J.T @ r)


def gn_refine(
    corr: CorrespondenceSet,
    pose0: Pose,
    sigma_d: float,
    sigma_theta: float,
    iterations: int = 1,
) -> tuple[Pose, GnWorkspace]:
    """Plain Gauss-Newton on the whitened ML cost; every step is applied."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pose = pose0
    ws = None
    for _ in range(iterations):
        r, J = whitened_system(corr, pose, sigma_d, sigma_theta)
        step = -_solve_normal(J, r)
        ws = GnWorkspace(r, J, step, cost_before=float(r @ r) / corr.n)
        pose = Pose(pose.rotation @ so3_exp(step[:3]), pose.translation + step[3:])
    ws.cost_after = ml_cost(corr, pose, sigma_d, sigma_theta)
    return pose, ws


def ml_cost(corr: CorrespondenceSet, pose: Pose, sigma_d: float, sigma_theta: float) -> float:
    fd, ft = residuals(corr, pose)
    return float(np.mean(fd**2 / sigma_d**2 + ft**2 / sigma_theta**2))


# ------------------------------------------------------------------- pipeline


def residual_distance_variance(corr: CorrespondenceSet, t_hat) -> float:
    """Distance-noise variance from range residuals at ``t_hat`` (n - 3 dof).

    Much tighter than the closed-form value from the sphere intersection,
    whose error scales with range / sqrt(n) rather than sigma / sqrt(n).
    """
    fd = corr.distances - np.linalg.norm(corr.world_points - np.asarray(t_hat), axis=1)
    return float(fd @ fd / max(corr.n - 3, 1))


def bestanp(
    corr: CorrespondenceSet,
    *,
    gn_iterations: int = 1,
    bias_correction: bool = True,
    sign_rule: str = "majority",
    weights: str = "residual",
) -> EstimateReport:
    """Full pipeline: translation, noise variances, rotation, Gauss-Newton.

    ``weights`` picks the distance standard deviation used to whiten the
    Gauss-Newton system: ``"residual"`` (range residuals at the closed-form
    translation) or ``"closed_form"`` (the sphere-intersection byproduct).
    ``bias_correction=False`` drops the ``sigma^2 S`` correction (ablation).
    """
    if corr.n < MIN_POINTS:
        raise TooFewPoints(f"BESTAnP needs n >= {MIN_POINTS} correspondences, got {corr.n}")
    if weights not in ("residual", "closed_form"):
        raise ValueError(f"unknown weights {weights!r}")
    tr = estimate_translation(corr)
    Q, S = _q_and_s(corr, tr.t_hat)
    s2 = _sigma_theta_from(Q, S)
    rot = estimate_rotation(corr, tr.t_hat, s2 if bias_correction else 0.0, sign_rule=sign_rule, Q=Q, S=S)
    if not bias_correction:
        rot = RotationEstimate(rot.r_hat, rot.R_be, s2, rot.smallest_eigenvalue, rot.sign_agreement)
    sd2 = residual_distance_variance(corr, tr.t_hat) if weights == "residual" else tr.sigma_d_sq_hat
    sd = float(np.sqrt(max(sd2, VARIANCE_FLOOR)))
    st = float(np.sqrt(max(s2, VARIANCE_FLOOR)))
    pose0 = Pose(rot.R_be, tr.t_hat)
    cost0 = ml_cost(corr, pose0, sd, st)
    if gn_iterations == 0:
        return EstimateReport(tr, rot, pose0, cost0, cost0, 0, sd, st)
    pose, ws = gn_refine(corr, pose0, sd, st, gn_iterations)
    return EstimateReport(tr, rot, pose, cost0, ws.cost_after, gn_iterations, sd, st, ws)


# ----------------------------------------------------------------------- CRLB


def compute_crlb(world_points, true_pose: Pose, sigma_d: float, sigma_theta: float) -> np.ndarray:
    """Inverse Fisher information of the tangent-noise model, ordered ``[s, t]``.

    The rotation block lives in the right-perturbation chart ``R* exp(s^)``,
    which is the chart of ``Log(R*^T R_hat)``.
    """
    if sigma_d <= 0 or sigma_theta <= 0:
        raise ValueError("CRLB needs strictly positive noise levels")
    P = np.atleast_2d(np.asarray(world_points, dtype=float))
    corr = CorrespondenceSet(P, np.zeros(len(P)), np.zeros(len(P)))
    _, J = whitened_system(corr, true_pose, sigma_d, sigma_theta)
    H = J.T @ J
    lam = np.linalg.eigvalsh(H)
    if lam[0] <= 0 or lam[-1] / lam[0] > MAX_NORMAL_COND:
        raise SingularNormalMatrix("Fisher information is singular", stage="crlb")
    C = np.linalg.inv(H)
    return 0.5 * (C + C.T)


def crlb_root_traces(crlb: np.ndarray) -> tuple[float, float]:
    """(translation, rotation) root-trace of the CRLB blocks."""
    return float(np.sqrt(np.trace(crlb[3:, 3:]))), float(np.sqrt(np.trace(crlb[:3, :3])))
