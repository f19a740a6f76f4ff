"""Sonar-only odometry: AnP tracking against a map grown by two-view triangulation."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import CorrespondenceSet, EstimationError, bestanp
from .geometry import Pose, geodesic_error, so3_exp, so3_log
from .harness import trial_rng
from .sonar import FovSpec, NoiseModel, image_points, in_fov_mask, perturb, project_points
from .triangulation import (
    TriangulationError,
    TwoViewObservation,
    default_gate_threshold,
    gate_point,
    point_std,
    triangulate_two_view,
)
from .sonar import SonarMeasurement


class BadParams(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class TrackingLost(RuntimeError):
    def __init__(self, message: str, frame: int):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


class TrajectoryShape(str, enum.Enum):
    EIGHT = "eight"
    CIRCLE = "circle"
    FROM_FILE = "from_file"


@dataclass
class Trajectory:
    poses: list[Pose]
    timestamps: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.poses) != len(self.timestamps):
            raise BadParams("poses and timestamps differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise BadParams("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def prefix(self, k: int) -> "Trajectory":
        return Trajectory(self.poses[:k], self.timestamps[:k])

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory([T.compose(p) for p in self.poses], self.timestamps.copy())

    def to_dict(self) -> dict:
        return {
            "timestamps": self.timestamps.tolist(),
            "poses": [{"rotation_vector": p.rotvec.tolist(), "translation": p.translation.tolist()} for p in self.poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        poses = [Pose.from_rotvec(p["rotation_vector"], p["translation"]) for p in d["poses"]]
        ts = d.get("timestamps")
        return cls(poses, np.arange(len(poses), dtype=float) if ts is None else ts)


def _heading_pose(pos: np.ndarray, vel: np.ndarray, roll: float) -> Pose:
    """Sonar x-axis along the horizontal velocity, z up, then rolled about x."""
    yaw = np.arctan2(vel[1], vel[0])
    R = so3_exp([0.0, 0.0, yaw]) @ so3_exp([roll, 0.0, 0.0])
    return Pose(R, pos)


def generate_trajectory(
    shape: str | TrajectoryShape,
    *,
    frames: int = 200,
    radius: float = 2.0,
    height: float = 0.0,
    roll_amplitude: float = np.deg2rad(30.0),
    roll_cycles: float = 32.0,
    heave_amplitude: float = 0.0,
    dt: float = 0.1,
    path: str | None = None,
) -> Trajectory:
    """Synthetic closed trajectories spanning one period.

    ``eight``: Lissajous ``radius * (sin s, sin s cos s)``; ``circle``:
    ``radius * (cos s, sin s)``. The sonar looks along the direction of
    travel and rolls sinusoidally so that elevation is observable from two
    views; ``heave_amplitude`` adds vertical motion (eight only).
    """
    shape = TrajectoryShape(shape)
    if shape is TrajectoryShape.FROM_FILE:
        if path is None:
            raise BadParams("from_file needs a path")
        with open(path) as f:
            return Trajectory.from_dict(json.load(f))
    if radius <= 0 or frames < 3 or dt <= 0:
        raise BadParams("need radius > 0, frames >= 3, dt > 0")
    s = np.linspace(0.0, 2 * np.pi, frames)
    if shape is TrajectoryShape.CIRCLE:
        pos = np.column_stack([radius * np.cos(s), radius * np.sin(s), np.full(frames, height)])
        vel = np.column_stack([-np.sin(s), np.cos(s), np.zeros(frames)])
    else:
        pos = np.column_stack(
            [radius * np.sin(s), radius * np.sin(s) * np.cos(s), height + heave_amplitude * np.sin(2 * s)]
        )
        vel = np.column_stack([np.cos(s), np.cos(2 * s), np.zeros(frames)])
    roll = roll_amplitude * np.sin(roll_cycles * s)
    poses = [_heading_pose(pos[k], vel[k], roll[k]) for k in range(frames)]
    return Trajectory(poses, dt * np.arange(frames))


def scatter_scene(
    truth: Trajectory,
    fov: FovSpec,
    rng: np.random.Generator,
    target: int = 50,
    band: tuple[int, int] = (45, 55),
    max_rounds: int = 20,
) -> np.ndarray:
    """Uniform points in a slab around the path, density tuned to ~``target`` in view."""
    P = truth.positions
    reach = fov.max_distance
    lo = P.min(axis=0) - [reach, reach, 0.0]
    hi = P.max(axis=0) + [reach, reach, 0.0]
    zr = reach * np.sin(fov.elevation_halfwidth + np.deg2rad(25.0))
    lo[2] -= zr
    hi[2] += zr
    volume = float(np.prod(hi - lo))
    wedge = fov.max_distance**3 / 3 * 2 * fov.azimuth_halfwidth * 2 * np.sin(fov.elevation_halfwidth)
    density = target / wedge
    for _ in range(max_rounds):
        m = max(int(round(density * volume)), target)
        pts = rng.uniform(lo, hi, size=(m, 3))
        med = float(np.median([np.count_nonzero(in_fov_mask(p, pts, fov)) for p in truth.poses]))
        if band[0] <= med <= band[1]:
            return pts
        density *= target / max(med, 1.0)
    raise BadParams(f"could not tune scene density into {band} (median {med})")


@dataclass(frozen=True)
class OdometryConfig:
    init_frames: int = 2
    init_pose_noise: tuple[float, float] = (1e-3, 1e-3)  # (rad, m)
    min_track_points: int = 6
    gate_threshold: float | None = None  # None: 3-sigma default from the noise model
    fov: FovSpec = FovSpec()
    noise: NoiseModel = NoiseModel()
    abnormal_factor: float = 10.0
    # map points whose reprojection in a tracked frame exceeds this many gate
    # thresholds are dropped and the frame re-solved; None disables the check
    track_outlier_factor: float | None = None
    # reject new points whose predicted position std exceeds this multiple of the
    # position noise scale (see point_std_limit); None disables
    point_std_factor: float | None = 5.0
    pose_uncertainty: bool = True  # fold tracked-pose covariance into the point std
    # "latest": pair the two newest frames; "parallax": pair the newest frame with the
    # point's first sighting once their azimuth planes differ by min_parallax
    pairing: str = "parallax"
    min_parallax: float = np.deg2rad(8.0)
    window: int = 60

    def __post_init__(self):
        if self.init_frames < 2:
            raise BadParams("init_frames must be >= 2")
        if self.min_track_points < 6:
            raise BadParams("min_track_points must be >= 6")
        if self.pairing not in ("latest", "parallax"):
            raise BadParams(f"unknown pairing {self.pairing!r}")

    @property
    def threshold(self) -> float:
        if self.gate_threshold is not None:
            return self.gate_threshold
        return default_gate_threshold(self.noise.sigma_d, self.noise.sigma_theta, self.fov.max_distance)

    @property
    def point_std_limit(self) -> float | None:
        """Largest accepted triangulated-point std (m).

        Scales with the larger of measurement noise and initial pose noise,
        each expressed as a position error at maximum range.
        """
        if self.point_std_factor is None:
            return None
        D = self.fov.max_distance
        sr, st = self.init_pose_noise
        scale = max(self.noise.sigma_d, self.noise.sigma_theta * D, st, sr * D)
        return self.point_std_factor * scale if scale > 0 else None


@dataclass
class MapPoint:
    point: np.ndarray
    observations: int
    residual: float


@dataclass
class MapStore:
    points: dict[int, MapPoint] = field(default_factory=dict)
    retired: set[int] = field(default_factory=set)  # ids dropped as outliers; never re-added

    def __len__(self):
        return len(self.points)

    def __contains__(self, pid):
        return pid in self.points

    def insert(self, pid: int, point: np.ndarray, residual: float):
        if pid in self.points:
            raise KeyError(f"point {pid} already mapped")
        self.points[pid] = MapPoint(np.asarray(point, float), 2, float(residual))

    def retire(self, pid: int):
        del self.points[pid]
        self.retired.add(pid)


@dataclass(frozen=True)
class TrajectoryErrors:
    ate_t: float
    ate_r: float  # degrees
    rpe_t: float
    rpe_r: float  # degrees

    def to_dict(self) -> dict:
        return {"ate_t": self.ate_t, "ate_r": self.ate_r, "rpe_t": self.rpe_t, "rpe_r": self.rpe_r}


@dataclass
class FrameRecord:
    frame: int
    pose: Pose
    ml_cost: float = float("nan")
    n_points: int = 0


@dataclass
class OdometryResult:
    estimate: Trajectory
    map: MapStore
    errors: TrajectoryErrors
    records: list[FrameRecord]
    completed: bool
    lost_at: int | None = None
    reason: str = ""


def compute_ate(truth: Trajectory, estimate: Trajectory) -> tuple[float, float]:
    """RMS translation error (m) and RMS geodesic rotation error (deg); no alignment."""
    if len(truth) != len(estimate):
        raise LengthMismatch(f"{len(truth)} truth poses vs {len(estimate)} estimates")
    et = [np.sum((a.translation - b.translation) ** 2) for a, b in zip(truth.poses, estimate.poses)]
    er = [geodesic_error(a.rotation, b.rotation) ** 2 for a, b in zip(truth.poses, estimate.poses)]
    return float(np.sqrt(np.mean(et))), float(np.rad2deg(np.sqrt(np.mean(er))))


def compute_rpe(truth: Trajectory, estimate: Trajectory, delta: int = 1) -> tuple[float, float]:
    """RMS of the relative-motion error over frame pairs ``(k, k + delta)``."""
    if len(truth) != len(estimate):
        raise LengthMismatch(f"{len(truth)} truth poses vs {len(estimate)} estimates")
    if len(truth) < delta + 1:
        raise LengthMismatch(f"need at least {delta + 1} poses for delta={delta}")
    et, er = [], []
    for k in range(len(truth) - delta):
        rel_true = truth.poses[k].inverse().compose(truth.poses[k + delta])
        rel_est = estimate.poses[k].inverse().compose(estimate.poses[k + delta])
        E = rel_true.inverse().compose(rel_est)
        et.append(E.translation @ E.translation)
        er.append(np.sum(so3_log(E.rotation) ** 2))
    return float(np.sqrt(np.mean(et))), float(np.rad2deg(np.sqrt(np.mean(er))))


def trajectory_errors(truth: Trajectory, estimate: Trajectory) -> TrajectoryErrors:
    a = compute_ate(truth, estimate)
    r = compute_rpe(truth, estimate) if len(truth) > 1 else (0.0, 0.0)
    return TrajectoryErrors(a[0], a[1], r[0], r[1])


def observe(
    scene: np.ndarray, pose: Pose, cfg: OdometryConfig, rng: np.random.Generator
) -> dict[int, SonarMeasurement]:
    """Noisy readings of every in-view scene point, keyed by point id."""
    ids = np.flatnonzero(in_fov_mask(pose, scene, cfg.fov))
    if len(ids) == 0:
        return {}
    d, tn, cs = project_points(pose, scene[ids])
    d, tn, cs = perturb(d, tn, cs, cfg.noise, rng)
    return {int(i): SonarMeasurement(float(a), float(b), int(c)) for i, a, b, c in zip(ids, d, tn, cs)}


def _perturb_pose(pose: Pose, sigma_rot: float, sigma_t: float, rng: np.random.Generator) -> Pose:
    # both perturbations in the body frame so a change of world frame commutes with them
    ds = rng.normal(0.0, sigma_rot, 3)
    dt = rng.normal(0.0, sigma_t, 3)
    return Pose(pose.rotation @ so3_exp(ds), pose.translation + pose.rotation @ dt)


def _plane_angle(pose_a: Pose, ma: SonarMeasurement, pose_b: Pose, mb: SonarMeasurement) -> float:
    na = pose_a.rotation[:, 1] - ma.azimuth_tangent * pose_a.rotation[:, 0]
    nb = pose_b.rotation[:, 1] - mb.azimuth_tangent * pose_b.rotation[:, 0]
    s = np.linalg.norm(np.cross(na, nb)) / (np.linalg.norm(na) * np.linalg.norm(nb))
    return float(np.arcsin(min(s, 1.0)))


def _try_insert(store: MapStore, pid: int, pose_a, ma, pose_b, mb, cfg: OdometryConfig, covs=(None, None)) -> bool:
    tv = TwoViewObservation(pose_a, pose_b, ma, mb)
    try:
        tp = triangulate_two_view(tv)
    except TriangulationError:
        return False
    if tp.ambiguous or not gate_point(tp, cfg.threshold):
        return False
    nz = cfg.noise
    limit = cfg.point_std_limit
    if limit is not None and max(nz.sigma_d, nz.sigma_theta) > 0:
        std = point_std(tv, tp.point, max(nz.sigma_d, 1e-12), max(nz.sigma_theta, 1e-12), *covs)
        if std > limit:
            return False
    store.insert(pid, tp.point, tp.residual_reprojection)
    return True


def _triangulate_new(
    store: MapStore, est: list[Pose], obs: list[dict], k: int, cfg: OdometryConfig, covs: list | None = None
):
    """Add unmapped points seen in frame ``k`` to the map."""

    def cov(j):
        return covs[j] if covs is not None and cfg.pose_uncertainty else None

    for pid in sorted(obs[k]):
        if pid in store or pid in store.retired:
            continue
        if cfg.pairing == "latest":
            if pid in obs[k - 1]:
                _try_insert(store, pid, est[k - 1], obs[k - 1][pid], est[k], obs[k][pid], cfg, (cov(k - 1), cov(k)))
            continue
        # earliest sighting inside the window with enough parallax
        for j in range(max(0, k - cfg.window), k):
            mj = obs[j].get(pid)
            if mj is None:
                continue
            if _plane_angle(est[j], mj, est[k], obs[k][pid]) >= cfg.min_parallax:
                _try_insert(store, pid, est[j], mj, est[k], obs[k][pid], cfg, (cov(j), cov(k)))
            break


def _pose_covariance(rep) -> np.ndarray | None:
    if rep.workspace is None:
        return None
    J = rep.workspace.jacobian
    try:
        return np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        return None


def _solve(store: MapStore, frame_obs: dict, ids: list[int]):
    corr = CorrespondenceSet.from_measurements(
        np.array([store.points[i].point for i in ids]), [frame_obs[i] for i in ids]
    )
    return bestanp(corr), corr


def _track(store: MapStore, frame_obs: dict, ids: list[int], cfg: OdometryConfig):
    """Pose from the visible map points, retiring points that reproject badly."""
    rep, corr = _solve(store, frame_obs, ids)
    if cfg.track_outlier_factor is None:
        return rep, ids
    d, tn, cs = project_points(rep.pose, corr.world_points)
    res = np.linalg.norm(
        image_points(d, tn, cs) - image_points(corr.distances, corr.tangents, corr.cos_signs), axis=1
    )
    bad = res > cfg.track_outlier_factor * cfg.threshold
    if not bad.any() or np.count_nonzero(~bad) < cfg.min_track_points:
        return rep, ids
    for pid in np.asarray(ids)[bad]:
        store.retire(int(pid))
    ids = [i for i, b in zip(ids, bad) if not b]
    rep, _ = _solve(store, frame_obs, ids)
    return rep, ids


def run_odometry(
    scene_points: np.ndarray,
    truth: Trajectory,
    cfg: OdometryConfig,
    seed: int = 0,
    raise_on_lost: bool = False,
) -> OdometryResult:
    """Track every frame after initialisation with BESTAnP against the growing map.

    On lost tracking (too few mapped points in view, estimator failure, or a
    translation jump above ``abnormal_factor`` times the median inter-frame
    motion so far) the run stops and errors cover the completed prefix.
    """
    scene = np.asarray(scene_points, dtype=float)
    K = len(truth)
    if K < cfg.init_frames + 1:
        raise BadParams("trajectory shorter than the initialisation window")
    obs = [observe(scene, truth.poses[k], cfg, trial_rng(seed, 1, k)) for k in range(K)]
    init_rng = trial_rng(seed, 2)
    sr, st = cfg.init_pose_noise
    est = [_perturb_pose(truth.poses[k], sr, st, init_rng) for k in range(cfg.init_frames)]
    records = [FrameRecord(k, est[k], float("nan"), 0) for k in range(cfg.init_frames)]
    covs = [np.diag([sr**2] * 3 + [st**2] * 3)] * cfg.init_frames
    store = MapStore()
    for k in range(1, cfg.init_frames):
        _triangulate_new(store, est, obs, k, replace(cfg, pairing="latest"), covs)

    lost_at, reason = None, ""
    for k in range(cfg.init_frames, K):
        ids = [pid for pid in sorted(obs[k]) if pid in store]
        if len(ids) < cfg.min_track_points:
            lost_at, reason = k, f"only {len(ids)} mapped points in view"
            break
        try:
            rep, ids = _track(store, obs[k], ids, cfg)
        except EstimationError as e:
            lost_at, reason = k, f"{e.stage}: {e}"
            break
        steps = np.linalg.norm(np.diff([p.translation for p in est], axis=0), axis=1)
        jump = np.linalg.norm(rep.pose.translation - est[-1].translation)
        if len(steps) and jump > cfg.abnormal_factor * max(float(np.median(steps)), 1e-9):
            lost_at, reason = k, f"abnormal jump {jump:.3f} m"
            break
        est.append(rep.pose)
        covs.append(_pose_covariance(rep))
        records.append(FrameRecord(k, rep.pose, rep.ml_cost_final, len(ids)))
        for pid in ids:
            store.points[pid].observations += 1
        _triangulate_new(store, est, obs, k, cfg, covs)

    done = len(est)
    if lost_at is not None and raise_on_lost:
        raise TrackingLost(reason, lost_at)
    estimate = Trajectory(est, truth.timestamps[:done].copy())
    errors = trajectory_errors(truth.prefix(done), estimate)
    return OdometryResult(estimate, store, errors, records, lost_at is None, lost_at, reason)
