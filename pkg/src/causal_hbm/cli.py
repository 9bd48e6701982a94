"""Command-line entry point.

Set ``CAUSAL_HBM_LOG`` (e.g. ``INFO``) for progress output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cluster, harness, hbm, transport
from .data import standardize
from .io import load_dataset, load_groups, read_json, write_dataset, write_json
from .scm import ToyModelConfig, generate_toy_dataset
from .transport import DistanceMatrix, DistanceSpec


def _load(path, raw: bool = False):
    ds = load_dataset(path)
    return ds if raw else standardize(ds)[0]


def _trainer(path, seed=None) -> hbm.TrainerConfig:
    cfg = hbm.TrainerConfig.from_json(read_json(path)) if path else hbm.TrainerConfig()
    return cfg if seed is None else replace(cfg, seed=seed)


def cmd_generate(args) -> None:
    cfg = ToyModelConfig.from_json(read_json(args.config)) if args.config else ToyModelConfig.desk()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = generate_toy_dataset(cfg)
    write_dataset(ds, args.out)
    write_json(Path(args.out) / "config.json", cfg.to_json())
    print(f"wrote {len(ds.tasks)} tasks to {args.out}")


def _distance_spec(arg: str) -> DistanceSpec:
    if arg.endswith(".json"):
        return DistanceSpec.from_json(read_json(arg))
    return DistanceSpec.named(arg)


def cmd_distances(args) -> None:
    ds = _load(args.dataset, args.raw)
    spec = _distance_spec(args.distance)
    if args.id_samples:
        spec = replace(spec, id_samples=args.id_samples)
    spec = replace(spec, seed=args.seed)
    emb = None
    if spec.kind == "IP":
        cfg = _trainer(args.trainer, args.seed)
        params, _ = hbm.train_meta(ds.train, ds.val, cfg)
        emb = hbm.local_embeddings(params, ds.tasks, cfg)
    dist = transport.make_distance(spec, ds.task_scms, emb, ds.train, ds.intervention_nodes)
    d = transport.distance_matrix(ds.train, spec, dist=dist)
    held = [*ds.val, *ds.test]
    cross = transport.cross_distances(held, ds.train, dist)
    write_json(args.out, {"spec": spec.to_json(), "train": d.to_json(),
                          "heldout_ids": [t.task_id for t in held], "cross": cross.tolist()})
    print(f"{spec.label}: {d.n} training tasks, {len(held)} held-out tasks -> {args.out}")


def cmd_cluster(args) -> None:
    obj = read_json(args.distances)
    d = DistanceMatrix.from_json(obj.get("train", obj))
    assign = cluster.spectral_cluster(cluster.affinity(d), args.C, seed=args.seed)
    groups = {str(i): int(c) for i, c in zip(d.task_ids, assign.labels)}
    cross = np.array(obj.get("cross", []), dtype=float).reshape(len(obj.get("heldout_ids", [])), d.n)
    if len(cross):
        held = cluster.assign_from_distances(cross, assign)
        groups.update({str(i): int(c) for i, c in zip(obj["heldout_ids"], held)})
    out = {"C": args.C, "labels": [int(v) for v in assign.labels], "groups": groups}
    if args.dataset:
        ds = load_dataset(args.dataset)
        truth = {t.task_id: t.group for t in ds.tasks}
        if all(v is not None for v in truth.values()):
            train_ids = set(d.task_ids)
            for name, ids in (("f1_train", list(d.task_ids)),
                              ("f1_heldout", [int(i) for i in groups if int(i) not in train_ids])):
                if ids:
                    out[name] = cluster.group_recovery_f1([groups[str(i)] for i in ids], [truth[i] for i in ids])
    write_json(args.out, out)
    print(f"grouped {len(groups)} tasks into {args.C} groups -> {args.out}")


def cmd_train(args) -> None:
    ds = _load(args.dataset, args.raw)
    cfg = _trainer(args.config, args.seed)
    if args.groups:
        groups = load_groups(args.groups)
        C = max(groups.values()) + 1
    else:
        groups, C = {t.task_id: 0 for t in ds.tasks}, 1
    cfg = replace(cfg, n_groups=C)
    if args.no_warm_start:
        params, tlog = hbm.train(ds.train, ds.val, groups, cfg)
    else:
        params, tlog = hbm.fit_hierarchical(ds.train, ds.val, groups, cfg)
    hbm.save_checkpoint(args.out, params, cfg, groups, tlog)
    print(f"best epoch {tlog.best_epoch}, checkpoint -> {args.out}")


def cmd_evaluate(args) -> None:
    ds = _load(args.dataset, args.raw)
    params, cfg, groups = hbm.load_checkpoint(args.ckpt)
    tasks = ds.split(args.split)
    per_task = hbm.evaluate_hbm(params, tasks, groups, cfg)
    report = {"split": args.split, "n_tasks": len(tasks),
              "rmse": harness.task_averaged_rmse(per_task),
              "per_task": {str(k): v for k, v in per_task.items()}}
    write_json(args.out, report)
    print(f"{args.split} RMSE {report['rmse']:.4f} -> {args.out}")


def cmd_experiment(args) -> None:
    spec = harness.ExperimentSpec.from_json(read_json(args.spec))
    if args.out:
        spec.out_dir = args.out
    report = harness.run_experiment(spec)
    for row in report["aggregates"]:
        print(f"{harness.series_name(row):>16} C={row['C']}: RMSE {row['test_rmse_mean']} "
              f"(sd {row['test_rmse_sd']}, n={row['n']}, failed={row['n_failed']})")


def cmd_recipe(args) -> None:
    config = read_json(args.config) if args.config else {}
    report = harness.run_recipe(args.name, config, args.out)
    print(f"recipe {args.name} finished; {len(report.get('cells', []))} cells -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-hbm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a toy multi-task dataset")
    g.add_argument("--config", help="ToyModelConfig JSON (default: desk-scale)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def data_args(sp):
        sp.add_argument("--dataset", required=True, help="dataset directory or .jsonl file")
        sp.add_argument("--raw", action="store_true", help="skip standardisation")

    d = sub.add_parser("distances", help="pairwise causal distances between tasks")
    data_args(d)
    d.add_argument("--distance", "--spec", dest="distance", default="SHD", help="preset name (SHD, SID, OD, ID, OP, IP, ...) or spec JSON")
    d.add_argument("--id-samples", type=int)
    d.add_argument("--trainer", help="TrainerConfig JSON (IP embeddings)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distances)

    c = sub.add_parser("cluster", help="spectral grouping from a distances file")
    c.add_argument("--distances", "--matrix", dest="distances", required=True)
    c.add_argument("--C", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--dataset", help="dataset with ground truth, for F1")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", help="train the hierarchical model")
    data_args(t)
    t.add_argument("--groups", help="groups JSON; omitted means a single group")
    t.add_argument("--config", help="TrainerConfig JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-warm-start", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="query RMSE of a checkpoint")
    data_args(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run an experiment grid from a spec JSON")
    x.add_argument("--spec", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("recipe", help="run a named recipe")
    r.add_argument("name", choices=sorted(harness.RECIPES))
    r.add_argument("--config", help="recipe keyword arguments as JSON")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recipe)
    return p


def main(argv=None) -> int:
    level = os.environ.get("CAUSAL_HBM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
