#!/usr/bin/env python3
"""Run the full scenario-by-estimator experiment grid and print the summary
table (values in 10^-3 K).  Worker fan-out honors HEMSIM_THREADS."""

import argparse
from pathlib import Path

from hemsim.harness import MatrixConfig, run_experiment_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--days", type=int, default=30)
    ap.add_argument("--out", type=Path, default=Path("runs/matrix"))
    ap.add_argument("--jobs", type=int, default=0,
                    help="worker cap (0: use HEMSIM_THREADS)")
    args = ap.parse_args()

    cfg = MatrixConfig(duration_days=args.days, out_dir=str(args.out),
                       n_jobs=args.jobs)
    result = run_experiment_matrix(cfg)
    print(result.format_summary())


if __name__ == "__main__":
    main()
