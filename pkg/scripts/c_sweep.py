"""Test RMSE vs number of causal groups C for every method (plot data in plot.csv)."""

import argparse
import logging
from dataclasses import replace

from causal_hbm import harness
from causal_hbm.hbm import TrainerConfig
from causal_hbm.io import read_json
from causal_hbm.scm import ToyModelConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--c-grid", type=int, nargs="+", default=[2, 4, 6, 8])
    p.add_argument("--distances", nargs="+", default=["SHD", "ID", "OP", "IP"])
    p.add_argument("--methods", nargs="+", default=list(harness.METHODS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--id-samples", type=int, default=200)
    p.add_argument("--trainer", help="TrainerConfig JSON")
    p.add_argument("--unrolled", action="store_true", help="differentiate through the inner loop")
    p.add_argument("--out", default="results/c_sweep")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = ToyModelConfig.desk() if args.scale == "desk" else ToyModelConfig()
    trainer = TrainerConfig.from_json(read_json(args.trainer)) if args.trainer else TrainerConfig()
    if args.unrolled:
        trainer = replace(trainer, meta_gradient_mode="unrolled")
    report = harness.recipe_c_sweep(base, seeds=tuple(args.seeds), c_grid=tuple(args.c_grid),
                                    distances=tuple(args.distances), methods=tuple(args.methods),
                                    trainer=trainer, id_samples=args.id_samples, out_dir=args.out)
    for row in report["aggregates"]:
        print(f"C={row['C']} {harness.series_name(row):>12}: {row['test_rmse_mean']:.4f} +- {row['test_rmse_sd']:.4f}")


if __name__ == "__main__":
    main()
