#!/usr/bin/env python3
"""Multi-seed odometry table for the eight and circle trajectories.

    python3 scripts/run_odometry.py --seeds 20 --sigma 1e-3
"""
import argparse
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from bestanp.harness import trial_rng
from bestanp.odometry import OdometryConfig, generate_trajectory, run_odometry, scatter_scene
from bestanp.sonar import NoiseModel


def one(job):
    shape, seed, sigma = job
    truth = generate_trajectory(shape)
    cfg = OdometryConfig(noise=NoiseModel(sigma, sigma))
    res = run_odometry(scatter_scene(truth, cfg.fov, trial_rng(seed, 0)), truth, cfg, seed=seed)
    e = res.errors
    return shape, seed, res.completed, len(res.estimate), e.ate_t, e.ate_r, e.rpe_t, e.rpe_r


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--sigma", type=float, default=1e-3)
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    jobs = [(s, k, args.sigma) for s in ("eight", "circle") for k in range(args.seeds)]
    with ProcessPoolExecutor(args.workers) as ex:
        out = list(ex.map(one, jobs))
    print("shape,seed,completed,frames,ate_t_m,ate_r_deg,rpe_t_m,rpe_r_deg")
    for row in out:
        print(",".join(str(x) if not isinstance(x, float) else f"{x:.5f}" for x in row))
    for shape in ("eight", "circle"):
        A = np.array([r[4:] for r in out if r[0] == shape])
        med = np.median(A, axis=0)
        print(f"# {shape} median: ATE {med[0]:.4f} m / {med[1]:.2f} deg, RPE {med[2]:.4f} m / {med[3]:.2f} deg")


if __name__ == "__main__":
    main()
