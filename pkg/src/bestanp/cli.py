"""Command-line front end.

Units at every file boundary: metres for distances and translations, radians
for angles (``theta``, rotation vectors). FOV extents in config files may be
given in degrees through the ``*_deg`` keys.

Exit codes: 0 ok, 2 input error, 3 estimator error, 4 sweep exhaustion,
5 tracking lost early.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .estimator import CorrespondenceSet, EstimationError, bestanp, compute_crlb, crlb_root_traces
from .geometry import Pose, geodesic_error
from .harness import (
    SCHEMA_VERSION,
    ExperimentConfig,
    rows_to_csv,
    rows_to_json,
    run_sweep,
    run_timing,
    simulate_correspondences,
    trial_rng,
)
from .odometry import (
    BadParams,
    OdometryConfig,
    generate_trajectory,
    run_odometry,
    scatter_scene,
)
from .sonar import FovSpec, NoiseModel, average_reprojection_error, image_points

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATOR, EXIT_SWEEP, EXIT_LOST = 0, 2, 3, 4, 5
ODOMETRY_CSV_HEADER = ["frame", "tx", "ty", "tz", "rx", "ry", "rz", "ml_cost", "n_points"]
LOST_FRACTION = 0.25


class InputError(Exception):
    pass


# ------------------------------------------------------------------ file io


def atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def content_hash(data: bytes) -> str:
    """Git blob hash (sha1 over ``blob <len>\\0`` + bytes)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_output(path: str | None, text: str, manifest: dict | None = None) -> None:
    if path is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    atomic_write(path, text)
    if manifest is not None:
        manifest = dict(manifest, finished_at=_now())
        atomic_write(path + ".manifest.json", json.dumps(manifest, indent=2) + "\n")


def make_manifest(command: str, config: dict, seed, inputs: list[bytes], started: str) -> dict:
    h = hashlib.sha1()
    for blob in inputs:
        h.update(content_hash(blob).encode())
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": "bestanp",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "input_hash": h.hexdigest() if inputs else None,
        "started_at": started,
    }


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e


def _json(raw: bytes, path: str) -> dict:
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be an object")
    return doc


def _finite_array(v, shape_tail, what: str) -> np.ndarray:
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError) as e:
        raise InputError(f"{what}: not numeric") from e
    if a.shape[1:] != shape_tail or (shape_tail == () and a.ndim != 1):
        raise InputError(f"{what}: bad shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{what}: non-finite values")
    return a


def parse_correspondence_file(doc: dict) -> tuple[CorrespondenceSet, Pose | None]:
    """CorrespondenceFile -> (correspondences, optional truth pose)."""
    if "points" not in doc or "measurements" not in doc:
        raise InputError("correspondence file needs 'points' and 'measurements'")
    P = _finite_array(doc["points"], (3,), "points")
    try:
        d = [m["d"] for m in doc["measurements"]]
        th = [m["theta"] for m in doc["measurements"]]
    except (TypeError, KeyError) as e:
        raise InputError("each measurement needs 'd' and 'theta'") from e
    d = _finite_array(d, (), "measurements.d")
    th = _finite_array(th, (), "measurements.theta")
    if not len(P) == len(d) == len(th):
        raise InputError(f"{len(P)} points but {len(d)} measurements")
    truth = None
    if doc.get("truth") is not None:
        t = doc["truth"]
        try:
            rv = _finite_array(t["rotation_vector"], (), "truth.rotation_vector")
            tr = _finite_array(t["translation"], (), "truth.translation")
        except (TypeError, KeyError) as e:
            raise InputError("truth needs 'rotation_vector' and 'translation'") from e
        if rv.shape != (3,) or tr.shape != (3,):
            raise InputError("truth vectors must have 3 entries")
        truth = Pose.from_rotvec(rv, tr)
    return CorrespondenceSet.from_angles(P.reshape(-1, 3), d, th), truth


def correspondence_document(corr: CorrespondenceSet, truth: Pose | None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "points": corr.world_points.tolist(),
        "measurements": [{"d": float(d), "theta": float(t)} for d, t in zip(corr.distances, corr.thetas)],
    }
    if truth is not None:
        doc["truth"] = {"rotation_vector": truth.rotvec.tolist(), "translation": truth.translation.tolist()}
    return doc


def _fov_from(d: dict | None) -> FovSpec:
    if not d:
        return FovSpec()
    d = dict(d)
    if "azimuth_deg" in d or "elevation_deg" in d:
        return FovSpec.from_degrees(**d)
    return FovSpec(**d)


def _rows_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


# ----------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    started = _now()
    try:
        noise = NoiseModel(args.sigma_d, args.sigma_theta, args.mechanism)
        fov = FovSpec.from_degrees(args.max_distance, args.azimuth_deg, args.elevation_deg)
    except ValueError as e:
        raise InputError(str(e)) from e
    if args.n < 1:
        raise InputError("--n must be >= 1")
    pose, corr = simulate_correspondences(args.n, fov, noise, trial_rng(args.seed))
    text = json.dumps(correspondence_document(corr, pose), indent=2) + "\n"
    config = {"n": args.n, "sigma_d": args.sigma_d, "sigma_theta": args.sigma_theta,
              "mechanism": noise.mechanism.value, "fov": {"max_distance": args.max_distance,
              "azimuth_deg": args.azimuth_deg, "elevation_deg": args.elevation_deg}}
    write_output(args.out, text, make_manifest("simulate", config, args.seed, [], started))
    return EXIT_OK


def estimate_document(corr: CorrespondenceSet, truth: Pose | None, gn_iterations: int = 1, sign_rule: str = "majority") -> dict:
    rep = bestanp(corr, gn_iterations=gn_iterations, sign_rule=sign_rule)
    pose = rep.pose
    doc = {
        "schema_version": SCHEMA_VERSION,
        "n": corr.n,
        "rotation_vector": pose.rotvec.tolist(),
        "translation": pose.translation.tolist(),
        "sigma_d_hat": math.sqrt(max(rep.t_be.sigma_d_sq_hat, 0.0)),
        "sigma_theta_hat": math.sqrt(max(rep.r_be.sigma_theta_sq_hat, 0.0)),
        "sigma_d_used": rep.sigma_d_used,
        "sigma_theta_used": rep.sigma_theta_used,
        "ml_cost_initial": rep.ml_cost_initial,
        "ml_cost_final": rep.ml_cost_final,
        "gn_iterations": rep.gn_iterations,
    }
    if truth is not None:
        observed = image_points(corr.distances, corr.tangents, corr.cos_signs)
        doc["rotation_error_rad"] = geodesic_error(pose.rotation, truth.rotation)
        doc["translation_error_m"] = float(np.linalg.norm(pose.translation - truth.translation))
        doc["are_m"] = average_reprojection_error(pose, corr.world_points, observed)
    return doc


def cmd_estimate(args) -> int:
    started = _now()
    raw = _read(args.input)
    corr, truth = parse_correspondence_file(_json(raw, args.input))
    doc = estimate_document(corr, truth, args.gn_iterations, args.sign_rule)
    if args.format == "csv":
        keys = [k for k in doc if k not in ("schema_version", "rotation_vector", "translation")]
        header = ["rx", "ry", "rz", "tx", "ty", "tz"] + keys
        text = _rows_csv(header, [doc["rotation_vector"] + doc["translation"] + [doc[k] for k in keys]])
    else:
        text = json.dumps(doc, indent=2) + "\n"
    config = {"input": args.input, "gn_iterations": args.gn_iterations, "sign_rule": args.sign_rule}
    write_output(args.out, text, make_manifest("estimate", config, args.seed, [raw], started))
    return EXIT_OK


def cmd_crlb(args) -> int:
    started = _now()
    raw = _read(args.input)
    corr, truth = parse_correspondence_file(_json(raw, args.input))
    if truth is None:
        raise InputError("crlb needs a 'truth' block in the correspondence file")
    if args.sigma_d <= 0 or args.sigma_theta <= 0:
        raise InputError("noise levels must be positive")
    C = compute_crlb(corr.world_points, truth, args.sigma_d, args.sigma_theta)
    rt, rr = crlb_root_traces(C)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "ordering": ["s_x", "s_y", "s_z", "t_x", "t_y", "t_z"],
        "sigma_d": args.sigma_d,
        "sigma_theta": args.sigma_theta,
        "cov_bound": C.tolist(),
        "root_trace_t": rt,
        "root_trace_r": rr,
    }
    config = {"input": args.input, "sigma_d": args.sigma_d, "sigma_theta": args.sigma_theta}
    write_output(args.out, json.dumps(doc, indent=2) + "\n", make_manifest("crlb", config, args.seed, [raw], started))
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = _now()
    raw = _read(args.config)
    doc = _json(raw, args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.workers is not None:
        doc["workers"] = args.workers
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise InputError(f"{args.config}: {e}") from e
    rows = run_sweep(cfg)
    text = rows_to_json(rows, cfg) + "\n" if args.format == "json" else rows_to_csv(rows)
    write_output(args.out, text, make_manifest("sweep", cfg.to_dict(), cfg.seed, [raw], started))
    exhausted = [r.sweep_value for r in rows if r.failure_count >= cfg.trials]
    if exhausted:
        print(f"every trial failed at sweep value(s) {exhausted}", file=sys.stderr)
        return EXIT_SWEEP
    return EXIT_OK


def cmd_timing(args) -> int:
    started = _now()
    if not args.n or min(args.n) < 6 or args.repetitions < 1:
        raise InputError("--n values must be >= 6 and --repetitions >= 1")
    res = run_timing(sorted(args.n), args.repetitions, seed=args.seed or 0)
    if args.format == "json":
        text = json.dumps({"schema_version": SCHEMA_VERSION, "rows": [{"n": n, "mean_s": t} for n, t in res]}, indent=2) + "\n"
    else:
        text = _rows_csv(["n", "mean_s"], [[n, t] for n, t in res])
    config = {"n": sorted(args.n), "repetitions": args.repetitions}
    write_output(args.out, text, make_manifest("timing", config, args.seed, [], started))
    return EXIT_OK


def odometry_setup(doc: dict, seed: int):
    """Config document -> (scene points, truth trajectory, OdometryConfig)."""
    try:
        tj = dict(doc.get("trajectory", {"shape": "eight"}))
        if "roll_amplitude_deg" in tj:
            tj["roll_amplitude"] = math.radians(tj.pop("roll_amplitude_deg"))
        shape = tj.pop("shape", "eight")
        truth = generate_trajectory(shape, **tj)
        fov = _fov_from(doc.get("fov"))
        noise = NoiseModel(**doc.get("noise", {}))
        keys = ("init_frames", "min_track_points", "gate_threshold", "abnormal_factor", "pairing",
                "window", "point_std_factor", "pose_uncertainty", "track_outlier_factor")
        extra = {k: doc[k] for k in keys if k in doc}
        if "init_pose_noise" in doc:
            extra["init_pose_noise"] = tuple(float(x) for x in doc["init_pose_noise"])
        if "min_parallax_deg" in doc:
            extra["min_parallax"] = math.radians(doc["min_parallax_deg"])
        cfg = OdometryConfig(fov=fov, noise=noise, **extra)
        scene_doc = doc.get("scene", {})
        if "points" in scene_doc:
            scene = _finite_array(scene_doc["points"], (3,), "scene.points")
        else:
            scene = scatter_scene(truth, fov, trial_rng(seed, 0), scene_doc.get("target", 50),
                                  tuple(scene_doc.get("band", (45, 55))))
        if doc.get("world_transform"):
            wt = doc["world_transform"]
            T = Pose.from_rotvec(wt["rotation_vector"], wt["translation"])
            truth = truth.transformed(T)
            scene = T.to_world(scene)
    except (TypeError, ValueError, KeyError, OSError) as e:
        raise InputError(f"odometry config: {e}") from e
    return scene, truth, cfg


def cmd_odometry(args) -> int:
    started = _now()
    raw = _read(args.config)
    doc = _json(raw, args.config)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    scene, truth, cfg = odometry_setup(doc, seed)
    try:
        res = run_odometry(scene, truth, cfg, seed=seed)
    except BadParams as e:
        raise InputError(str(e)) from e
    frames = [
        [r.frame, *r.pose.translation.tolist(), *r.pose.rotvec.tolist(), r.ml_cost, r.n_points] for r in res.records
    ]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "frames": len(truth),
        "completed_frames": len(res.records),
        "completed": res.completed,
        "lost_at": res.lost_at,
        "reason": res.reason,
        "map_points": len(res.map),
        "errors": res.errors.to_dict(),
        "units": {"ate_t": "m", "ate_r": "deg", "rpe_t": "m", "rpe_r": "deg"},
    }
    if args.out is not None:
        if args.format == "json":
            body = json.dumps(dict(summary, per_frame=[dict(zip(ODOMETRY_CSV_HEADER, f)) for f in frames]), indent=2) + "\n"
        else:
            body = _rows_csv(ODOMETRY_CSV_HEADER, frames)
        manifest = make_manifest("odometry", doc, seed, [raw], started)
        write_output(args.out, body, manifest)
        atomic_write(args.out + ".errors.json", json.dumps(summary, indent=2) + "\n")
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    if not res.completed and res.lost_at is not None and res.lost_at < LOST_FRACTION * len(truth):
        print(f"tracking lost at frame {res.lost_at}: {res.reason}", file=sys.stderr)
        return EXIT_LOST
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="64-bit RNG seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (atomic write + manifest)")
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(
        prog="bestanp",
        description="Sonar pose estimation tools. Distances in metres, angles in radians.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="64-bit RNG seed")
    p.add_argument("--out", default=None, help="output path (atomic write + manifest)")
    p.add_argument("--format", choices=("csv", "json"), default=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("estimate", parents=[common], help="pose from a correspondence file")
    s.add_argument("input", help='JSON {"points": [[x,y,z]...], "measurements": [{"d": m, "theta": rad}...], "truth"?}')
    s.add_argument("--gn-iterations", type=int, default=1)
    s.add_argument("--sign-rule", choices=("majority", "first"), default="majority")
    s.set_defaults(func=cmd_estimate, default_format="json")

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic correspondence file")
    s.add_argument("--n", type=int, default=14)
    s.add_argument("--sigma-d", type=float, default=1e-3, help="range noise std (m)")
    s.add_argument("--sigma-theta", type=float, default=1e-3, help="azimuth noise std")
    s.add_argument("--mechanism", choices=("on_tangent", "on_angle"), default="on_tangent")
    s.add_argument("--max-distance", type=float, default=6.0)
    s.add_argument("--azimuth-deg", type=float, default=30.0, help="azimuth half-width (deg)")
    s.add_argument("--elevation-deg", type=float, default=10.0, help="elevation half-width (deg)")
    s.set_defaults(func=cmd_simulate, default_format="json")

    s = sub.add_parser("sweep", parents=[common], help="Monte Carlo sweep from a JSON config")
    s.add_argument("config")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_sweep, default_format="csv")

    s = sub.add_parser("odometry", parents=[common], help="sonar-only odometry run from a JSON config")
    s.add_argument("config")
    s.set_defaults(func=cmd_odometry, default_format="csv")

    s = sub.add_parser("crlb", parents=[common], help="CRLB at the truth pose of a correspondence file")
    s.add_argument("input")
    s.add_argument("--sigma-d", type=float, default=1e-3)
    s.add_argument("--sigma-theta", type=float, default=1e-3)
    s.set_defaults(func=cmd_crlb, default_format="json")

    s = sub.add_parser("timing", parents=[common], help="bestanp wall-clock per point count")
    s.add_argument("--n", type=int, nargs="+", default=[10, 100, 1000])
    s.add_argument("--repetitions", type=int, default=100)
    s.set_defaults(func=cmd_timing, default_format="csv")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors already; keep --help/--version at 0
        return int(e.code or 0)
    if args.format is None:
        args.format = args.default_format
    if args.command == "simulate" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as e:
        print(f"estimator error [{e.stage}]: {e}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
