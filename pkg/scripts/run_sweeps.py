#!/usr/bin/env python3
"""Run the synthetic Monte Carlo studies and write one CSV per study.

    python3 scripts/run_sweeps.py --out results/ --trials 1000
    python3 scripts/run_sweeps.py --only point_count --trials 200
"""
import argparse
import os
import time

from bestanp.harness import ExperimentConfig, loglog_slope, rows_to_csv, run_sweep
from bestanp.sonar import NoiseModel

STUDIES = {
    # noise levels swept jointly on distance and azimuth, n = 14
    "noise": dict(sweep_kind="noise", sweep_values=[1e-4, 3e-4, 1e-3, 3e-3, 1e-2], base_n=14),
    "point_count": dict(sweep_kind="point_count", sweep_values=[10, 30, 90, 270, 1000]),
    # aperture multiplier: azimuth half-width 3a deg, elevation half-width a deg
    "fov": dict(sweep_kind="fov", sweep_values=list(range(1, 11)), base_n=100),
    "noise_mechanism": dict(sweep_kind="noise_mechanism", sweep_values=[1e-4, 1e-3, 1e-2]),
    "gn_iterations": dict(sweep_kind="gn_iterations", sweep_values=[1, 2, 3, 5, 10], base_n=270),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--only", nargs="*", choices=sorted(STUDIES))
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name in args.only or STUDIES:
        spec = dict(STUDIES[name])
        cfg = ExperimentConfig(
            trials=args.trials, seed=args.seed, workers=args.workers,
            base_noise=NoiseModel(1e-3, 1e-3), **spec,
        )
        t0 = time.perf_counter()
        rows = run_sweep(cfg)
        path = os.path.join(args.out, f"{name}.csv")
        with open(path, "w") as f:
            f.write(rows_to_csv(rows))
        print(f"{name}: {len(rows)} rows in {time.perf_counter() - t0:.1f} s -> {path}")
        if name == "point_count":
            xs = [r.sweep_value for r in rows]
            print(f"  slope t {loglog_slope(xs, [r.rmse_t for r in rows]):.3f}, r {loglog_slope(xs, [r.rmse_r for r in rows]):.3f}")


if __name__ == "__main__":
    main()
