"""Drive every CLI command once into a directory and collect comparable outputs."""

import csv
import io
import json
from pathlib import Path

from causal_hbm import cli

TINY_DATA = {"n_train": 8, "n_val": 3, "n_test": 3, "m_support": 5, "m_query": 5, "n_groups": 2, "seed": 1}
TINY_TRAINER = {"epochs": 2, "warm_start_epochs": 1, "predictive_samples": 4, "baseline_epochs": 2,
                "local_steps": 3}


def _write(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


def run_pipeline(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    cfg = _write(root / "data_cfg.json", TINY_DATA)
    trainer = _write(root / "trainer.json", TINY_TRAINER)
    data = str(root / "data")
    cli.main(["generate", "--config", cfg, "--seed", "2", "--out", data])
    for name in ("SHD", "OD", "IP"):
        cli.main(["distances", "--dataset", data, "--distance", name, "--id-samples", "30",
                  "--trainer", trainer, "--out", str(root / f"dist_{name}.json")])
    cli.main(["cluster", "--distances", str(root / "dist_SHD.json"), "--C", "2", "--dataset", data,
              "--out", str(root / "groups.json")])
    cli.main(["train", "--dataset", data, "--groups", str(root / "groups.json"), "--config", trainer,
              "--seed", "0", "--out", str(root / "ckpt")])
    cli.main(["evaluate", "--dataset", data, "--ckpt", str(root / "ckpt"), "--out", str(root / "eval.json")])
    spec = {"name": "tiny", "dataset": {"generate": TINY_DATA}, "distances": ["SHD"], "c_grid": [2],
            "methods": ["ours", "meta", "global", "local"], "seeds": [0], "trainer": TINY_TRAINER}
    cli.main(["experiment", "--spec", _write(root / "spec.json", spec), "--out", str(root / "exp")])
    recipe = {"base": {**TINY_DATA, "missing_stratum_prob": 0.5}, "seeds": [0], "C": 2, "trainer": TINY_TRAINER}
    cli.main(["recipe", "ablation_ip", "--config", _write(root / "recipe.json", recipe),
              "--out", str(root / "ablation")])
    dv = {"base": TINY_DATA, "seeds": [0], "c_values": [1, 2], "distances": ["SHD", "OD"], "corr_c": 2,
          "group_cs": [2], "id_samples": 20}
    cli.main(["recipe", "distance_validation", "--config", _write(root / "dv.json", dv),
              "--out", str(root / "dv")])


# wall-clock timing and the output location itself are allowed to differ
IGNORED_KEYS = ("seconds", "out_dir")


def _drop_ignored(obj):
    if isinstance(obj, dict):
        return {k: _drop_ignored(v) for k, v in obj.items() if k not in IGNORED_KEYS}
    if isinstance(obj, list):
        return [_drop_ignored(v) for v in obj]
    return obj


def comparable_outputs(root: Path) -> dict[str, bytes]:
    """Every output file, with ignored fields removed from reports and cell tables."""
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = str(path.relative_to(root))
        raw = path.read_bytes()
        if path.name == "report.json":
            raw = json.dumps(_drop_ignored(json.loads(raw)), sort_keys=True).encode()
        elif path.name == "cells.csv":
            rows = list(csv.DictReader(io.StringIO(raw.decode())))
            raw = json.dumps([{k: v for k, v in r.items() if k != "seconds"} for r in rows]).encode()
        out[rel] = raw
    return out
