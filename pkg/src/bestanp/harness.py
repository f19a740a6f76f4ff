"""Monte Carlo experiments: noise, point-count, FOV, noise-mechanism, GN-iteration sweeps and timing.

Random streams are numpy ``PCG64`` generators seeded from the entropy tuple
``(seed, sweep_index, trial_index)``, so every trial is reproducible on its
own and trials can run in any order or in parallel.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .estimator import (
    CorrespondenceSet,
    EstimationError,
    _check_coplanarity,
    bestanp,
    compute_crlb,
)
from .geometry import Pose, so3_exp, so3_log
from .sonar import FovSpec, NoiseMechanism, NoiseModel, perturb, project_points

CSV_HEADER = ["sweep_value", "rmse_t", "rmse_r", "crlb_t", "crlb_r", "mean_runtime_s", "failures"]
SCHEMA_VERSION = 1
MAX_SCENE_ATTEMPTS = 100
POSE_BOX = 4.0
MAX_POSE_ANGLE = np.pi / 4


class DegenerateScene(RuntimeError):
    pass


class SweepKind(str, enum.Enum):
    NOISE = "noise"
    POINT_COUNT = "point_count"
    FOV = "fov"
    NOISE_MECHANISM = "noise_mechanism"
    GN_ITERATIONS = "gn_iterations"
    TIMING = "timing"


def trial_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, path)])


def random_pose(rng: np.random.Generator, box: float = POSE_BOX, max_angle: float = MAX_POSE_ANGLE) -> Pose:
    """Uniform axis, angle uniform in [0, max_angle], translation uniform in a ``box``-metre cube."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-box / 2, box / 2, 3)
    return Pose(so3_exp(axis * angle), t)


def sample_sonar_points(n: int, fov: FovSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform in (distance, azimuth, elevation) over the FOV box, sonar frame."""
    d = rng.uniform(fov.min_distance, fov.max_distance, n)
    th = rng.uniform(-fov.azimuth_halfwidth, fov.azimuth_halfwidth, n)
    ph = rng.uniform(-fov.elevation_halfwidth, fov.elevation_halfwidth, n)
    c = np.cos(ph)
    return np.column_stack([d * c * np.cos(th), d * c * np.sin(th), d * np.sin(ph)])


def generate_scene(n: int, fov: FovSpec, pose: Pose, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    for _ in range(MAX_SCENE_ATTEMPTS):
        P = sample_sonar_points(n, fov, rng)
        if n < 4:
            break
        try:
            _check_coplanarity(P)
            break
        except EstimationError:
            continue
    else:
        raise DegenerateScene(f"no non-coplanar batch of {n} points after {MAX_SCENE_ATTEMPTS} attempts")
    return pose.to_world(P)


def simulate_correspondences(
    n: int, fov: FovSpec, noise: NoiseModel, rng: np.random.Generator, pose: Pose | None = None
) -> tuple[Pose, CorrespondenceSet]:
    """One synthetic trial: fresh pose (unless given), scene and noise."""
    if pose is None:
        pose = random_pose(rng)
    P = generate_scene(n, fov, pose, rng)
    d, tn, cs = project_points(pose, P)
    d, tn, cs = perturb(d, tn, cs, noise, rng)
    return pose, CorrespondenceSet(P, d, tn, cs)


def rmse(estimates: list[Pose], truth: Pose) -> tuple[float, float]:
    """(RMSE_t in metres, RMSE_R in radians) of a batch against one truth."""
    if not estimates:
        raise ValueError("need at least one estimate")
    et = [float(np.sum((e.translation - truth.translation) ** 2)) for e in estimates]
    er = [float(np.sum(so3_log(truth.rotation.T @ e.rotation) ** 2)) for e in estimates]
    return float(np.sqrt(np.mean(et))), float(np.sqrt(np.mean(er)))


@dataclass(frozen=True)
class ExperimentConfig:
    sweep_kind: SweepKind
    sweep_values: tuple
    trials: int = 1000
    base_noise: NoiseModel = NoiseModel()
    base_n: int = 14
    fov: FovSpec = FovSpec()
    seed: int = 0
    gn_iterations: int = 1
    bias_correction: bool = True
    weights: str = "residual"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sweep_kind", SweepKind(self.sweep_kind))
        vals = tuple(self.sweep_values)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not vals:
            raise ValueError("sweep_values must be non-empty")
        if list(vals) != sorted(vals):
            raise ValueError("sweep_values must be sorted")
        object.__setattr__(self, "sweep_values", vals)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("schema_version", None)
        if "base_noise" in d:
            d["base_noise"] = NoiseModel(**d["base_noise"])
        if "fov" in d:
            fov = dict(d["fov"])
            if "azimuth_deg" in fov or "elevation_deg" in fov:
                d["fov"] = FovSpec.from_degrees(**fov)
            else:
                d["fov"] = FovSpec(**fov)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sweep_kind"] = self.sweep_kind.value
        d["sweep_values"] = list(self.sweep_values)
        d["base_noise"]["mechanism"] = self.base_noise.mechanism.value
        return d


@dataclass
class ResultRow:
    sweep_value: float
    rmse_t: float
    rmse_r: float
    crlb_t: float  # sqrt of the trial-averaged CRLB translation trace
    crlb_r: float
    mean_runtime: float
    failure_count: int
    variant: str = ""
    trials: int = 0
    sq_err_t: np.ndarray = field(default=None, repr=False, compare=False)
    sq_err_r: np.ndarray = field(default=None, repr=False, compare=False)

    def csv_fields(self) -> list:
        return [self.sweep_value, self.rmse_t, self.rmse_r, self.crlb_t, self.crlb_r, self.mean_runtime, self.failure_count]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("sweep_value", "rmse_t", "rmse_r", "crlb_t", "crlb_r", "failure_count", "trials")}
        d["mean_runtime_s"] = self.mean_runtime
        if self.variant:
            d["variant"] = self.variant
        return d

    def rmse_interval(self, which: str = "t", level: float = 0.95, n_boot: int = 2000, seed: int = 0) -> tuple[float, float]:
        """Percentile-bootstrap interval for the RMSE."""
        sq = self.sq_err_t if which == "t" else self.sq_err_r
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(sq), size=(n_boot, len(sq)))
        boots = np.sqrt(sq[idx].mean(axis=1))
        a = (1 - level) / 2
        return float(np.quantile(boots, a)), float(np.quantile(boots, 1 - a))


def _trial_setup(cfg: ExperimentConfig, value) -> tuple[int, FovSpec, list[tuple[str, NoiseModel, int]]]:
    """(n, fov, [(variant, noise, gn_iterations)]) for one sweep value."""
    n, fov, noise, iters = cfg.base_n, cfg.fov, cfg.base_noise, cfg.gn_iterations
    kind = cfg.sweep_kind
    if kind is SweepKind.NOISE:
        noise = replace(noise, sigma_d=float(value), sigma_theta=float(value))
    elif kind is SweepKind.POINT_COUNT:
        n = int(value)
    elif kind is SweepKind.FOV:
        fov = FovSpec.from_degrees(fov.max_distance, 3.0 * value, float(value), fov.min_distance)
    elif kind is SweepKind.GN_ITERATIONS:
        iters = int(value)
    elif kind is SweepKind.NOISE_MECHANISM:
        base = replace(noise, sigma_d=float(value), sigma_theta=float(value))
        return n, fov, [
            (m.value, replace(base, mechanism=m), iters) for m in (NoiseMechanism.ON_TANGENT, NoiseMechanism.ON_ANGLE)
        ]
    elif kind is SweepKind.TIMING:
        n = int(value)
    return n, fov, [("", noise, iters)]


def _run_trial(args) -> list[tuple]:
    cfg, sweep_index, value, trial = args
    n, fov, variants = _trial_setup(cfg, value)
    out = []
    # iteration counts do not change the data, so compare them on the same trials
    stream = 0 if cfg.sweep_kind is SweepKind.GN_ITERATIONS else sweep_index
    for variant, noise, iters in variants:
        # variants of one trial share scene, pose and normal draws
        rng = trial_rng(cfg.seed, stream, trial)
        try:
            pose, corr = simulate_correspondences(n, fov, noise, rng)
        except DegenerateScene:
            out.append((variant, None))
            continue
        t0 = time.perf_counter()
        try:
            rep = bestanp(corr, gn_iterations=iters, bias_correction=cfg.bias_correction, weights=cfg.weights)
        except EstimationError:
            out.append((variant, None))
            continue
        dt = time.perf_counter() - t0
        C = compute_crlb(corr.world_points, pose, max(noise.sigma_d, 1e-12), max(noise.sigma_theta, 1e-12))
        et = float(np.sum((rep.pose.translation - pose.translation) ** 2))
        er = float(np.sum(so3_log(pose.rotation.T @ rep.pose.rotation) ** 2))
        out.append((variant, (et, er, float(np.trace(C[3:, 3:])), float(np.trace(C[:3, :3])), dt)))
    return out


def run_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    rows: list[ResultRow] = []
    for si, value in enumerate(cfg.sweep_values):
        jobs = [(cfg, si, value, k) for k in range(cfg.trials)]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as ex:
                results = list(ex.map(_run_trial, jobs, chunksize=max(1, cfg.trials // (4 * cfg.workers))))
        else:
            results = [_run_trial(j) for j in jobs]
        variants = [v for v, _ in results[0]]
        for vi, variant in enumerate(variants):
            ok = np.array([r[vi][1] for r in results if r[vi][1] is not None]).reshape(-1, 5)
            fails = cfg.trials - len(ok)
            if len(ok):
                et, er, ct, cr, dt = ok.T
                row = ResultRow(
                    value, float(np.sqrt(et.mean())), float(np.sqrt(er.mean())),
                    float(np.sqrt(ct.mean())), float(np.sqrt(cr.mean())), float(dt.mean()),
                    fails, variant, cfg.trials, et, er,
                )
            else:
                nan = float("nan")
                row = ResultRow(value, nan, nan, nan, nan, nan, fails, variant, cfg.trials, np.empty(0), np.empty(0))
            rows.append(row)
    return rows


def run_timing(n_values, repetitions: int = 100, seed: int = 0, group: int = 10) -> list[tuple[int, float]]:
    """Median-of-means wall-clock of :func:`bestanp` per point count.

    Data generation happens outside the timed region; one warm-up call
    precedes each batch.
    """
    out = []
    for i, n in enumerate(n_values):
        rng = trial_rng(seed, i)
        _, corr = simulate_correspondences(int(n), FovSpec(), NoiseModel(), rng)
        bestanp(corr)
        times = np.empty(repetitions)
        for k in range(repetitions):
            t0 = time.perf_counter()
            bestanp(corr)
            times[k] = time.perf_counter() - t0
        g = max(1, min(group, repetitions))
        means = [times[j:j + g].mean() for j in range(0, repetitions, g)]
        out.append((int(n), float(np.median(means))))
    return out


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    with_variant = any(r.variant for r in rows)
    w.writerow(CSV_HEADER + (["variant"] if with_variant else []))
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r.csv_fields()] + ([r.variant] if with_variant else []))
    return buf.getvalue()


def rows_to_json(rows: list[ResultRow], cfg: ExperimentConfig | None = None) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "rows": [r.to_dict() for r in rows]}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
    return json.dumps(doc, indent=2)


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
