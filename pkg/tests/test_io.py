import json

import numpy as np
import pytest

from causal_hbm import io
from causal_hbm.data import (
    GuardedTask,
    LabelLeak,
    fit_standardizer,
    guard_query_labels,
    standardize,
)
from causal_hbm.io import SchemaError, load_dataset, write_dataset
from causal_hbm.scm import ToyModelConfig, generate_toy_dataset

FOLDS = ("x_support", "t_support", "y_support", "x_query", "t_query", "y_query")


def good_record(**kw):
    rec = {"task_id": 0, "split": "train", "fold": "support", "x": [0.5, 1.0], "intervention": -1, "y": 0.3}
    rec.update(kw)
    return rec


def write_lines(path, records):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n")
    return path


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate_toy_dataset(ToyModelConfig.desk(n_train=6, n_val=2, n_test=2, n_groups=2, seed=4))
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.intervention_nodes == ds.intervention_nodes
    assert back.task_scms == ds.task_scms
    for a, b in zip(ds.tasks, back.tasks):
        assert (a.task_id, a.split, a.group) == (b.task_id, b.split, b.group)
        for f in FOLDS:
            assert np.array_equal(getattr(a, f), getattr(b, f)), f
            assert getattr(a, f).dtype.kind == getattr(b, f).dtype.kind


def test_load_accepts_file_path_and_infers_intervention_columns(tmp_path):
    recs = [good_record(intervention=1), good_record(fold="query", intervention=-1)]
    back = load_dataset(write_lines(tmp_path / "d.jsonl", recs))
    assert back.intervention_nodes == (1,)
    assert back.tasks[0].group is None and back.task_scms is None


def test_manifest_declares_intervention_columns(tmp_path):
    write_lines(tmp_path / io.DATASET_FILE, [good_record(), good_record(fold="query")])
    io.write_json(tmp_path / io.MANIFEST_FILE, {"intervention_columns": [0, 1]})
    assert load_dataset(tmp_path).intervention_nodes == (0, 1)
    io.write_json(tmp_path / io.MANIFEST_FILE, {"intervention_columns": [5]})
    with pytest.raises(SchemaError):
        load_dataset(tmp_path)


@pytest.mark.parametrize("bad, line", [
    ("{not json", 2),
    (json.dumps(good_record(split="holdout")), 2),
    (json.dumps(good_record(fold="both")), 2),
    (json.dumps(good_record(x=[1.0])), 2),
    (json.dumps(good_record(x=[1.0, "a"])), 2),
    (json.dumps(good_record(y=float("nan"))), 2),
    (json.dumps(good_record(intervention=2)), 2),
    (json.dumps(good_record(task_id="7")), 2),
    (json.dumps({"task_id": 0}), 2),
    (json.dumps(good_record(split="test")), 2),
])
def test_schema_errors_carry_line_numbers(tmp_path, bad, line):
    path = write_lines(tmp_path / "d.jsonl", [good_record(), bad])
    with pytest.raises(SchemaError) as exc:
        load_dataset(path)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_empty_dataset_and_missing_support(tmp_path):
    with pytest.raises(SchemaError):
        load_dataset(write_lines(tmp_path / "e.jsonl", [""]))
    with pytest.raises(SchemaError):
        load_dataset(write_lines(tmp_path / "q.jsonl", [good_record(fold="query")]))


def test_standardize_uses_training_statistics_only():
    ds = generate_toy_dataset(ToyModelConfig.desk(n_train=20, n_val=5, n_test=5, seed=2))
    out, st = standardize(ds)
    train = out.train
    x = np.concatenate([np.concatenate([t.x_support, t.x_query]) for t in train])
    y = np.concatenate([np.concatenate([t.y_support, t.y_query]) for t in train])
    np.testing.assert_allclose(x.mean(0), 0, atol=1e-9)
    np.testing.assert_allclose(x.std(0), 1, atol=1e-9)
    assert abs(y.mean()) < 1e-9 and abs(y.std() - 1) < 1e-9
    # held-out tasks go through the training transform, not their own
    raw = ds.test[0]
    np.testing.assert_array_equal(out.test[0].x_support, (raw.x_support - st.x_mean) / st.x_std)
    for other in (fit_standardizer(ds.tasks), fit_standardizer(ds.train)):
        assert np.array_equal(st.x_mean, other.x_mean) and np.array_equal(st.x_std, other.x_std)
        assert (st.y_mean, st.y_std) == (other.y_mean, other.y_std)


def test_query_label_guard_logs_reads():
    ds = generate_toy_dataset(ToyModelConfig.desk(n_train=2, n_val=1, n_test=2))
    reads = []
    guarded = guard_query_labels(ds.test, reads)
    assert isinstance(guarded[0], GuardedTask)
    _ = guarded[0].y_support, guarded[0].x_query, guarded[0].observed()
    assert reads == []
    _ = guarded[1].y_query
    assert reads == [ds.test[1].task_id]
    assert issubclass(LabelLeak, AssertionError)
