"""JSON-lines dataset files, the ground-truth sidecar and small JSON helpers.

A dataset directory holds ``dataset.jsonl`` (one record per sample), an
optional ``truth.json`` (groups and SCMs of synthetic data) and an optional
``manifest.json`` declaring the intervention columns of real data.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .data import NO_INTERVENTION, SPLITS, MultiTaskDataset, TaskDataset
from .scm import Scm

DATASET_FILE = "dataset.jsonl"
TRUTH_FILE = "truth.json"
MANIFEST_FILE = "manifest.json"
FOLDS = ("support", "query")
_FIELDS = ("task_id", "split", "fold", "x", "intervention", "y")


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def dataset_records(dataset: MultiTaskDataset):
    for t in dataset.tasks:
        for fold, x, tag, y in (("support", t.x_support, t.t_support, t.y_support),
                                ("query", t.x_query, t.t_query, t.y_query)):
            for i in range(len(y)):
                yield {"task_id": t.task_id, "split": t.split, "fold": fold,
                       "x": [float(v) for v in x[i]], "intervention": int(tag[i]), "y": float(y[i])}


def write_dataset(dataset: MultiTaskDataset, out_dir) -> Path:
    """Write the JSONL samples and, when known, the ground-truth sidecar."""
    out_dir = Path(out_dir)
    lines = [json.dumps(r, separators=(",", ":")) for r in dataset_records(dataset)]
    atomic_write_text(out_dir / DATASET_FILE, "\n".join(lines) + "\n")
    truth = ground_truth(dataset)
    if truth is not None:
        write_json(out_dir / TRUTH_FILE, truth)
    return out_dir / DATASET_FILE


def ground_truth(dataset: MultiTaskDataset) -> dict | None:
    labels = dataset.group_labels()
    if labels is None and dataset.task_scms is None:
        return None
    out = {"intervention_nodes": list(dataset.intervention_nodes), "meta": dataset.meta}
    if labels is not None:
        out["groups"] = {str(t.task_id): int(t.group) for t in dataset.tasks}
    if dataset.task_scms is not None:
        out["task_scms"] = {str(k): s.to_json() for k, s in sorted(dataset.task_scms.items())}
    for name in ("group_scms",):
        scms = getattr(dataset, name, None)
        if scms:
            out[name] = [s.to_json() for s in scms]
    ref = getattr(dataset, "reference_scm", None)
    if ref is not None:
        out["reference_scm"] = ref.to_json()
    cfg = getattr(dataset, "config", None)
    if cfg is not None:
        out["config"] = cfg.to_json()
    return out


def _resolve(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.is_dir():
        return path / DATASET_FILE, path
    return path, path.parent


def _check_record(rec, lineno: int, n_features: int | None) -> None:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object", lineno)
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        raise SchemaError(f"missing fields {missing}", lineno)
    if not isinstance(rec["task_id"], int) or isinstance(rec["task_id"], bool):
        raise SchemaError("task_id must be an integer", lineno)
    if rec["split"] not in SPLITS:
        raise SchemaError(f"split must be one of {SPLITS}", lineno)
    if rec["fold"] not in FOLDS:
        raise SchemaError(f"fold must be one of {FOLDS}", lineno)
    x = rec["x"]
    if not isinstance(x, list) or not x or not all(_is_real(v) for v in x):
        raise SchemaError("x must be a non-empty list of finite numbers", lineno)
    if n_features is not None and len(x) != n_features:
        raise SchemaError(f"x has {len(x)} features, expected {n_features}", lineno)
    tag = rec["intervention"]
    if not isinstance(tag, int) or isinstance(tag, bool) or tag < NO_INTERVENTION or tag >= len(x):
        raise SchemaError("intervention must be -1 or a feature index", lineno)
    if not _is_real(rec["y"]):
        raise SchemaError("y must be a finite number", lineno)


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def load_dataset(path) -> MultiTaskDataset:
    """Parse and validate a JSONL dataset, attaching ground truth when present."""
    data_path, root = _resolve(path)
    tasks: OrderedDict[int, dict] = OrderedDict()
    n_features = None
    with open(data_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None
            _check_record(rec, lineno, n_features)
            n_features = len(rec["x"])
            entry = tasks.setdefault(rec["task_id"], {"split": rec["split"], "support": [], "query": []})
            if entry["split"] != rec["split"]:
                raise SchemaError(f"task {rec['task_id']} appears in two splits", lineno)
            entry[rec["fold"]].append((rec["x"], rec["intervention"], rec["y"]))
    if not tasks:
        raise SchemaError("dataset is empty")

    truth = read_json(root / TRUTH_FILE) if (root / TRUTH_FILE).exists() else None
    groups = {int(k): v for k, v in truth.get("groups", {}).items()} if truth else {}
    out = []
    for task_id, entry in tasks.items():
        if not entry["support"]:
            raise SchemaError(f"task {task_id} has no support rows")
        arrays = {}
        for fold in FOLDS:
            rows = entry[fold]
            arrays[f"x_{fold}"] = np.array([r[0] for r in rows], dtype=float).reshape(len(rows), n_features)
            arrays[f"t_{fold}"] = np.array([r[1] for r in rows], dtype=int)
            arrays[f"y_{fold}"] = np.array([r[2] for r in rows], dtype=float)
        out.append(TaskDataset(task_id=task_id, split=entry["split"], group=groups.get(task_id), **arrays))

    meta: dict = {}
    task_scms = None
    if truth is not None:
        nodes = tuple(truth["intervention_nodes"])
        meta = truth.get("meta", {})
        if "task_scms" in truth:
            task_scms = {int(k): Scm.from_json(v) for k, v in truth["task_scms"].items()}
    elif (root / MANIFEST_FILE).exists():
        nodes = tuple(read_json(root / MANIFEST_FILE)["intervention_columns"])
    else:
        tags = np.concatenate([np.concatenate([t.t_support, t.t_query]) for t in out])
        nodes = tuple(int(v) for v in np.unique(tags) if v != NO_INTERVENTION)
    if any(not 0 <= v < n_features for v in nodes):
        raise SchemaError("intervention columns outside the feature range")
    return MultiTaskDataset(out, nodes, task_scms, meta)


def load_groups(path) -> dict[int, int]:
    """Read ``{"task_id": group}`` (or ``{"groups": {...}}``) as ints."""
    obj = read_json(path)
    obj = obj.get("groups", obj)
    return {int(k): int(v) for k, v in obj.items()}
