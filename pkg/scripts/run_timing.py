#!/usr/bin/env python3
"""Wall-clock of one bestanp call per point count (median of means)."""
import argparse

from bestanp.harness import run_timing


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, nargs="+", default=[10, 30, 100, 300, 1000, 3000])
    ap.add_argument("--repetitions", type=int, default=200)
    args = ap.parse_args()
    print("n,mean_ms")
    for n, t in run_timing(args.n, args.repetitions):
        print(f"{n},{t * 1e3:.3f}")


if __name__ == "__main__":
    main()
