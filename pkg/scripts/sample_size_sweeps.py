"""RMSE vs number of training tasks N and samples per task M at fixed C."""

import argparse
import logging

from causal_hbm import harness
from causal_hbm.scm import ToyModelConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--which", choices=("n", "m", "both"), default="both")
    p.add_argument("--n-values", type=int, nargs="+", default=[25, 50, 100])
    p.add_argument("--m-values", type=int, nargs="+", default=[5, 10, 20])
    p.add_argument("--C", type=int, default=4)
    p.add_argument("--distances", nargs="+", default=["SHD"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="results")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base, seeds, dists = ToyModelConfig.desk(), tuple(args.seeds), tuple(args.distances)
    runs = []
    if args.which in ("n", "both"):
        runs.append(harness.recipe_n_sweep(base, seeds, tuple(args.n_values), args.C, dists,
                                           out_dir=f"{args.out}/n_sweep"))
    if args.which in ("m", "both"):
        runs.append(harness.recipe_m_sweep(base, seeds, tuple(args.m_values), args.C, dists,
                                           out_dir=f"{args.out}/m_sweep"))
    for report in runs:
        for row in report["aggregates"]:
            print(f"{report['recipe']} x={row['x']} {harness.series_name(row):>12}: {row['test_rmse_mean']:.4f}")


if __name__ == "__main__":
    main()
