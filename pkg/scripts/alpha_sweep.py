"""Our method over the grid of observational/interventional weightings at fixed C."""

import argparse
import logging

from causal_hbm import harness
from causal_hbm.scm import ToyModelConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--alpha1", type=float, nargs="+", default=[100, 200, 400, 800, 1600, 3200])
    p.add_argument("--alpha2", type=float, nargs="+", default=[1, 2, 4, 8, 16, 32])
    p.add_argument("--kinds", nargs="+", default=["TOD", "TID"])
    p.add_argument("--C", type=int, default=4)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--id-samples", type=int, default=200)
    p.add_argument("--out", default="results/alpha_sweep")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    report = harness.recipe_alpha_sweep(ToyModelConfig.desk(), seeds=tuple(args.seeds), C=args.C,
                                        alpha1=tuple(args.alpha1), alpha2=tuple(args.alpha2),
                                        kinds=tuple(args.kinds), id_samples=args.id_samples, out_dir=args.out)
    for row in report["aggregates"]:
        print(f"{row['distance']:>24}: {row['test_rmse_mean']:.4f} +- {row['test_rmse_sd']:.4f}")


if __name__ == "__main__":
    main()
