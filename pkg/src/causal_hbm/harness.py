"""Experiment orchestration: datasets, distances, grouping, training, reports.

An experiment is a grid of cells (method, distance, C, seed). Baselines
ignore the distance. For generated datasets the number of true groups in the
data follows C, so a C grid doubles as a heterogeneity sweep.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cluster, hbm, transport
from .data import LabelLeak, MultiTaskDataset, guard_query_labels, standardize
from .hbm import LengthMismatch, TrainerConfig, rmse
from .io import atomic_write_text, load_dataset, write_json
from .scm import ToyModelConfig, generate_toy_dataset
from .transport import DistanceSpec

log = logging.getLogger(__name__)

METHODS = ("ours", "meta", "global", "local")
BASELINE_DISTANCE = "-"
CELL_FIELDS = ("method", "distance", "C", "seed", "test_rmse", "val_rmse", "f1_train", "f1_heldout",
               "f1_train_micro", "f1_heldout_micro", "best_epoch", "seconds", "error")
F1_FIELDS = ("f1_train", "f1_heldout", "f1_train_micro", "f1_heldout_micro")

__all__ = [
    "RECIPES",
    "ExperimentSpec",
    "LengthMismatch",
    "aggregate",
    "rmse",
    "run_experiment",
    "task_averaged_rmse",
    "validate_report",
]


def task_averaged_rmse(per_task: dict[int, float] | Sequence[float]) -> float:
    """Unweighted mean of per-task RMSEs."""
    vals = list(per_task.values()) if isinstance(per_task, dict) else list(per_task)
    if not vals:
        raise ValueError("no tasks to average")
    return float(np.mean(vals))


def _distance_spec(obj) -> DistanceSpec:
    if isinstance(obj, DistanceSpec):
        return obj
    if isinstance(obj, str):
        return DistanceSpec.named(obj)
    return DistanceSpec.from_json(obj)


@dataclass
class ExperimentSpec:
    dataset: ToyModelConfig | str
    distances: tuple = ("SHD",)
    c_grid: tuple[int, ...] = (4,)
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    # Monte Carlo sample count for OD/ID; None keeps each distance's own value
    id_samples: int | None = None
    standardize: bool = True
    out_dir: str | None = None
    name: str = "experiment"

    def __post_init__(self):
        self.distances = tuple(_distance_spec(d) for d in self.distances)
        self.c_grid = tuple(int(c) for c in self.c_grid)
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.out_dir is not None:
            self.out_dir = str(self.out_dir)
        if not self.methods or not self.seeds:
            raise ValueError("need at least one method and one seed")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if "ours" in self.methods and not self.distances:
            raise ValueError("method 'ours' needs at least one distance")
        if not self.c_grid or min(self.c_grid) < 1:
            raise ValueError("C grid must hold positive integers")
        if self.id_samples is not None:
            self.distances = tuple(replace(d, id_samples=self.id_samples) for d in self.distances)

    @property
    def generated(self) -> bool:
        return isinstance(self.dataset, ToyModelConfig)

    def to_json(self) -> dict:
        ds = {"generate": self.dataset.to_json()} if self.generated else {"path": str(self.dataset)}
        return {"name": self.name, "dataset": ds, "distances": [d.to_json() for d in self.distances],
                "c_grid": list(self.c_grid), "methods": list(self.methods), "seeds": list(self.seeds),
                "trainer": self.trainer.to_json(), "id_samples": self.id_samples,
                "standardize": self.standardize, "out_dir": self.out_dir}

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentSpec:
        obj = dict(obj)
        ds = obj.pop("dataset")
        dataset = ToyModelConfig.from_json(ds["generate"]) if "generate" in ds else ds["path"]
        trainer = TrainerConfig.from_json(obj.pop("trainer", {}))
        return cls(dataset=dataset, trainer=trainer, **obj)


class SeedContext:
    """Data and cached intermediate results shared by the cells of one seed."""

    def __init__(self, spec: ExperimentSpec, seed: int, data_groups: int | None):
        self.spec, self.seed = spec, seed
        if spec.generated:
            cfg = replace(spec.dataset, seed=seed)
            if data_groups is not None:
                cfg = replace(cfg, n_groups=data_groups)
            raw: MultiTaskDataset = generate_toy_dataset(cfg)
        else:
            raw = load_dataset(spec.dataset)
        self.dataset = standardize(raw)[0] if spec.standardize else raw
        self.trainer = replace(spec.trainer, seed=seed)
        self.train = self.dataset.train
        self.val = self.dataset.val
        self.test = self.dataset.test
        # held-out query labels may only be read when scoring
        self.label_reads: list[int] = []
        self.test_guarded = guard_query_labels(self.test, self.label_reads)
        self.shape = hbm.network_shape(self.train)
        self._meta = None
        self._embeddings = None
        self._distances: dict[str, tuple] = {}

    def check_no_leak(self, since: int = 0) -> None:
        """Raise if query labels were read after position ``since`` of the read log."""
        reads = self.label_reads[since:]
        if reads:
            raise LabelLeak(f"test query labels read for tasks {sorted(set(reads))[:5]}")

    def meta_model(self):
        if self._meta is None:
            self._meta = hbm.train_meta(self.train, self.val, self.trainer, shape=self.shape)
        return self._meta

    def embeddings(self):
        if self._embeddings is None:
            params, _ = self.meta_model()
            tasks = [*self.train, *self.val, *self.test_guarded]
            self._embeddings = hbm.local_embeddings(params, tasks, self.trainer)
        return self._embeddings

    def distances(self, dspec: DistanceSpec):
        """Train-by-train matrix and held-out-by-train cross distances."""
        key = repr(dspec.to_json())
        if key not in self._distances:
            emb = self.embeddings() if dspec.kind == "IP" else None
            dist = transport.make_distance(dspec, self.dataset.task_scms, emb, self.train,
                                           self.dataset.intervention_nodes)
            d = transport.distance_matrix(self.train, dspec, dist=dist)
            cross = transport.cross_distances([*self.val, *self.test_guarded], self.train, dist)
            self._distances[key] = (d, cross)
        return self._distances[key]


def _truth(tasks) -> np.ndarray | None:
    if any(t.group is None for t in tasks):
        return None
    return np.array([t.group for t in tasks])


def group_tasks(ctx: SeedContext, dspec: DistanceSpec, C: int):
    """Cluster training tasks, assign held-out tasks, and score recovery when truth is known."""
    d, cross = ctx.distances(dspec)
    assign = cluster.spectral_cluster(cluster.affinity(d), C, seed=ctx.seed)
    held = [*ctx.val, *ctx.test]
    held_labels = cluster.assign_from_distances(cross, assign)
    groups = {t.task_id: int(c) for t, c in zip(ctx.train, assign.labels)}
    groups.update({t.task_id: int(c) for t, c in zip(held, held_labels)})
    f1 = {}
    truth_train, truth_held = _truth(ctx.train), _truth(held)
    if truth_train is not None:
        f1["f1_train"] = cluster.group_recovery_f1(assign.labels, truth_train)
        f1["f1_train_micro"] = cluster.group_recovery_f1(assign.labels, truth_train, "micro")
    if truth_held is not None and held:
        f1["f1_heldout"] = cluster.group_recovery_f1(held_labels, truth_held)
        f1["f1_heldout_micro"] = cluster.group_recovery_f1(held_labels, truth_held, "micro")
    return groups, f1


def _run_cell(ctx: SeedContext, method: str, dspec: DistanceSpec | None, C: int) -> dict:
    cfg = ctx.trainer
    reads_before = len(ctx.label_reads)
    out: dict = {}
    if method == "ours":
        groups, f1 = group_tasks(ctx, dspec, C)
        out.update(f1)
        params, tlog = hbm.fit_hierarchical(ctx.train, ctx.val, groups, replace(cfg, n_groups=C), ctx.shape)
        preds = hbm.predict_hbm(params, ctx.test_guarded, groups, cfg)
    elif method == "meta":
        params, tlog = ctx.meta_model()
        preds = hbm.predict_hbm(params, ctx.test_guarded, {t.task_id: 0 for t in ctx.test}, cfg)
    elif method == "global":
        q, tlog = hbm.train_global(ctx.train, ctx.val, cfg, ctx.shape)
        preds = hbm.predict_global(q, ctx.test_guarded, cfg, ctx.shape)
    else:
        models = hbm.train_local(ctx.test_guarded, cfg, ctx.shape)
        preds = hbm.predict_local(models, ctx.test_guarded, cfg, ctx.shape)
        tlog = None
    ctx.check_no_leak(reads_before)
    out["test_rmse"] = task_averaged_rmse(hbm.score(preds, ctx.test))
    if tlog is not None:
        best = tlog.records[tlog.best_epoch] if tlog.best_epoch < len(tlog.records) else tlog.records[-1]
        out["val_rmse"] = best.val_rmse
        out["best_epoch"] = tlog.best_epoch
    return out


def _cells(spec: ExperimentSpec):
    for C in spec.c_grid:
        for seed in spec.seeds:
            for method in spec.methods:
                if method == "ours":
                    for d in spec.distances:
                        yield method, d, C, seed
                else:
                    yield method, None, C, seed


def run_experiment(spec: ExperimentSpec, write: bool = True) -> dict:
    """Run every cell; a failing cell records its error and the rest proceed."""
    contexts: dict[tuple, SeedContext] = {}
    cells = []
    for method, dspec, C, seed in _cells(spec):
        data_groups = C if spec.generated else None
        cell = {"method": method, "distance": dspec.label if dspec else BASELINE_DISTANCE,
                "C": C, "seed": seed, "error": None}
        t0 = time.perf_counter()
        try:
            key = (data_groups, seed)
            if key not in contexts:
                contexts.clear()
                contexts[key] = SeedContext(spec, seed, data_groups)
            cell.update(_run_cell(contexts[key], method, dspec, C))
        except Exception as exc:  # recorded in the report, the grid carries on
            log.exception("cell %s/%s/C=%d/seed=%d failed", method, cell["distance"], C, seed)
            cell["error"] = f"{type(exc).__name__}: {exc}"
        cell["seconds"] = time.perf_counter() - t0
        cells.append({k: cell.get(k) for k in CELL_FIELDS})
        log.info("cell %s", cells[-1])
    report = {"spec": spec.to_json(), "cells": cells, "aggregates": aggregate(cells)}
    validate_report(report)
    if write and spec.out_dir:
        write_report(report, spec.out_dir)
    return report


def _stats(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


def aggregate(cells: list[dict], keys=("method", "distance", "C")) -> list[dict]:
    """Mean and sample s.d. over seeds of every metric, per (method, distance, C)."""
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault(tuple(c[k] for k in keys), []).append(c)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if m["error"] is None]
        row = dict(zip(keys, key))
        row["n"] = len(ok)
        row["n_failed"] = len(members) - len(ok)
        for metric in ("test_rmse", *F1_FIELDS):
            vals = [m[metric] for m in ok if m.get(metric) is not None]
            mean, sd = _stats(vals)
            row[f"{metric}_mean"] = None if not vals else mean
            row[f"{metric}_sd"] = None if not vals else sd
        out.append(row)
    return out


def validate_report(report: dict) -> None:
    """Schema and range checks on a report; raises ``ValueError``."""
    for key in ("spec", "cells", "aggregates"):
        if key not in report:
            raise ValueError(f"report lacks {key!r}")
    for c in report["cells"]:
        missing = set(CELL_FIELDS) - set(c)
        if missing:
            raise ValueError(f"cell lacks {sorted(missing)}")
        if c["error"] is None:
            if c["test_rmse"] is None or not c["test_rmse"] >= 0:
                raise ValueError(f"bad RMSE in cell {c}")
        for f in F1_FIELDS:
            if c[f] is not None and not 0.0 <= c[f] <= 1.0:
                raise ValueError(f"{f} outside [0, 1] in cell {c}")


def cells_csv(cells: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CELL_FIELDS, lineterminator="\n")
    w.writeheader()
    for c in cells:
        w.writerow({k: ("" if c[k] is None else c[k]) for k in CELL_FIELDS})
    return buf.getvalue()


def series_name(row: dict) -> str:
    return row["method"] if row["distance"] == BASELINE_DISTANCE else f"{row['method']}({row['distance']})"


def plot_csv(aggregates: list[dict], x_key: str = "C", metric: str = "test_rmse") -> str:
    """Plot-ready rows ``x, series, mean, sd``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "series", "mean", "sd"])
    for row in aggregates:
        if row.get(f"{metric}_mean") is None:
            continue
        w.writerow([row[x_key], series_name(row), repr(row[f"{metric}_mean"]), repr(row[f"{metric}_sd"])])
    return buf.getvalue()


def write_report(report: dict, out_dir, x_key: str = "C") -> None:
    out = Path(out_dir)
    write_json(out / "report.json", report)
    atomic_write_text(out / "cells.csv", cells_csv(report["cells"]))
    atomic_write_text(out / "plot.csv", plot_csv(report["aggregates"], x_key))


def strip_timing(report: dict) -> dict:
    """Copy of a report without wall-clock fields, for reproducibility checks."""
    out = dict(report)
    out["cells"] = [{k: v for k, v in c.items() if k != "seconds"} for c in report["cells"]]
    return out


# ---------------------------------------------------------------- recipes

def _upper(d: np.ndarray) -> np.ndarray:
    return d[np.triu_indices(len(d), k=1)]


def _within_between(d: np.ndarray, labels: np.ndarray) -> tuple[float, float | None]:
    iu = np.triu_indices(len(d), k=1)
    same = labels[iu[0]] == labels[iu[1]]
    vals = d[iu]
    within = float(vals[same].mean())
    between = float(vals[~same].mean()) if np.any(~same) else None
    return within, between


def recipe_distance_validation(base: ToyModelConfig | None = None, seeds=(0, 1, 2), c_values=range(1, 9),
                               distances=("SHD", "SID", "OD", "ID"), corr_c: int = 4,
                               group_cs=(2, 4, 6, 8), id_samples: int = 100) -> dict:
    """Mean pairwise distances vs C, correlations between distances, within/between-group means."""
    base = base or ToyModelConfig.desk()
    specs = [replace(DistanceSpec.named(d), id_samples=id_samples) for d in distances]
    mean_rows, corr_rows, wb_rows = [], [], []
    for C in sorted(set(c_values) | set(group_cs) | {corr_c}):
        for seed in seeds:
            ds = generate_toy_dataset(replace(base, n_groups=C, seed=seed))
            tasks = ds.train
            labels = np.array([t.group for t in tasks])
            mats = {s.label: transport.distance_matrix(tasks, s, scms=ds.task_scms).d for s in specs}
            if C in c_values:
                for name, d in mats.items():
                    mean_rows.append({"C": C, "seed": seed, "distance": name, "mean": float(_upper(d).mean())})
            if C == corr_c:
                for a, b in itertools.combinations(mats, 2):
                    r = float(np.corrcoef(_upper(mats[a]), _upper(mats[b]))[0, 1])
                    corr_rows.append({"C": C, "seed": seed, "pair": f"{a}-{b}", "pearson": r})
            if C in group_cs:
                for name, d in mats.items():
                    within, between = _within_between(d, labels)
                    row = {"C": C, "seed": seed, "distance": name, "within": within}
                    if between is not None:
                        row["between"] = between
                    wb_rows.append(row)

    def summarise(rows, keys, metrics):
        groups: dict[tuple, list] = {}
        for r in rows:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r)
        out = []
        for key, members in groups.items():
            row = dict(zip(keys, key))
            for m in metrics:
                vals = [r[m] for r in members if m in r]
                if vals:
                    row[f"{m}_mean"], row[f"{m}_sd"] = _stats(vals)
            out.append(row)
        return out

    return {
        "recipe": "distance_validation",
        "config": base.to_json(), "seeds": list(seeds),
        "mean_pairwise": mean_rows,
        "mean_pairwise_summary": summarise(mean_rows, ("C", "distance"), ("mean",)),
        "correlations": corr_rows,
        "correlations_summary": summarise(corr_rows, ("C", "pair"), ("pearson",)),
        "within_between": wb_rows,
        "within_between_summary": summarise(wb_rows, ("C", "distance"), ("within", "between")),
    }


def recipe_ablation_ip(base: ToyModelConfig | None = None, seeds=(0, 1, 2), C: int = 4,
                       trainer: TrainerConfig | None = None, out_dir=None) -> dict:
    """IP1 (graded weights), IP2 (substituted strata dropped) and IP3 (unit weights)."""
    base = base or ToyModelConfig.desk(missing_stratum_prob=0.5)
    spec = ExperimentSpec(dataset=base, distances=("IP1", "IP2", "IP3"), c_grid=(C,), methods=("ours",),
                          seeds=seeds, trainer=trainer or TrainerConfig(), out_dir=out_dir,
                          name="ablation_ip")
    report = run_experiment(spec)
    report["recipe"] = "ablation_ip"
    return report


def recipe_c_sweep(base: ToyModelConfig | None = None, seeds=(0, 1, 2), c_grid=(2, 4, 6, 8),
                   distances=("SHD", "ID", "OP", "IP"), methods=METHODS, trainer: TrainerConfig | None = None,
                   id_samples: int | None = 200, out_dir=None) -> dict:
    spec = ExperimentSpec(dataset=base or ToyModelConfig.desk(), distances=distances, c_grid=c_grid,
                          methods=methods, seeds=seeds, trainer=trainer or TrainerConfig(),
                          id_samples=id_samples, out_dir=out_dir, name="c_sweep")
    report = run_experiment(spec)
    report["recipe"] = "c_sweep"
    return report


def recipe_alpha_sweep(base: ToyModelConfig | None = None, seeds=(0, 1, 2), C: int = 4,
                       alpha1=(100, 200, 400, 800, 1600, 3200), alpha2=(1, 2, 4, 8, 16, 32),
                       kinds=("TOD", "TID"), trainer: TrainerConfig | None = None, id_samples: int = 200,
                       out_dir=None) -> dict:
    """Our method over a grid of TOD/TID weightings at fixed C."""
    distances = [DistanceSpec(kind=k, alpha1=a1, alpha2=a2, id_samples=id_samples,
                              name=f"{k}(a1={a1},a2={a2})")
                 for k in kinds for a1 in alpha1 for a2 in alpha2]
    spec = ExperimentSpec(dataset=base or ToyModelConfig.desk(), distances=distances, c_grid=(C,),
                          methods=("ours",), seeds=seeds, trainer=trainer or TrainerConfig(),
                          out_dir=None, name="alpha_sweep")
    report = run_experiment(spec, write=False)
    report["recipe"] = "alpha_sweep"
    if out_dir:
        write_report(report, out_dir)
    return report


def _param_sweep(name: str, field_names: tuple[str, ...], values, base, seeds, C, distances, methods,
                 trainer, id_samples, out_dir) -> dict:
    base = base or ToyModelConfig.desk()
    cells, specs = [], []
    for v in values:
        cfg = replace(base, **{f: v for f in field_names})
        spec = ExperimentSpec(dataset=cfg, distances=distances, c_grid=(C,), methods=methods, seeds=seeds,
                              trainer=trainer or TrainerConfig(), id_samples=id_samples, name=name)
        rep = run_experiment(spec, write=False)
        specs.append(spec.to_json())
        cells.extend({**c, "x": v} for c in rep["cells"])
    aggregates = aggregate(cells, keys=("x", "method", "distance", "C"))
    report = {"recipe": name, "spec": {"sweeps": specs, "field": list(field_names), "values": list(values)},
              "cells": cells, "aggregates": aggregates}
    if out_dir:
        out = Path(out_dir)
        write_json(out / "report.json", report)
        atomic_write_text(out / "plot.csv", plot_csv(aggregates, x_key="x"))
    return report


def recipe_n_sweep(base=None, seeds=(0, 1, 2), values=(25, 50, 100), C: int = 4, distances=("SHD",),
                   methods=METHODS, trainer=None, id_samples=200, out_dir=None) -> dict:
    return _param_sweep("n_sweep", ("n_train",), values, base, seeds, C, distances, methods, trainer,
                        id_samples, out_dir)


def recipe_m_sweep(base=None, seeds=(0, 1, 2), values=(5, 10, 20), C: int = 4, distances=("SHD",),
                   methods=METHODS, trainer=None, id_samples=200, out_dir=None) -> dict:
    return _param_sweep("m_sweep", ("m_support", "m_query"), values, base, seeds, C, distances, methods,
                        trainer, id_samples, out_dir)


RECIPES = {
    "distance_validation": recipe_distance_validation,
    "ablation_ip": recipe_ablation_ip,
    "c_sweep": recipe_c_sweep,
    "alpha_sweep": recipe_alpha_sweep,
    "n_sweep": recipe_n_sweep,
    "m_sweep": recipe_m_sweep,
}


def run_recipe(name: str, config: dict | None = None, out_dir=None) -> dict:
    """Run a named recipe from a JSON-style config (``base`` and ``trainer`` as dicts)."""
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    kw = dict(config or {})
    if "base" in kw:
        kw["base"] = ToyModelConfig.from_json(kw["base"])
    if "trainer" in kw:
        kw["trainer"] = TrainerConfig.from_json(kw["trainer"])
    if name != "distance_validation":
        kw["out_dir"] = out_dir
    report = RECIPES[name](**kw)
    if name == "distance_validation" and out_dir:
        write_json(Path(out_dir) / "report.json", report)
    return report

