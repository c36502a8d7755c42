import json
import os
import time

import numpy as np
import pytest

from fedrf.coordinator import run_federation
from fedrf.dataset import DataParams, Dataset, load_dataset
from fedrf.errors import SingleClassPartition, TooFewRows
from fedrf.harness import (
    ExperimentConfig,
    acc_deviation,
    build_plan,
    centralized_run,
    config_from_dict,
    connect_clients,
    main as bench_main,
    partition,
    run_experiment,
    run_inprocess_federation,
    spawn_local_federation,
    summarize,
)
from fedrf.wire import ModelParams

from conftest import make_dataset


# --- partition -----------------------------------------------------------------

def test_partition_exact_arithmetic():
    data = make_dataset(n=100, f=3, seed=1)
    test, parts = partition(data, 4, 0.2, seed=0)
    assert test.n_samples == 20
    assert [p.n_samples for p in parts] == [20, 20, 20, 20]


def test_partition_2139_rows_gives_428_test():
    data = make_dataset(n=2139, f=3, seed=2)
    test, parts = partition(data, 3, 0.2, seed=0)
    assert test.n_samples == 428  # ceil(0.2 * 2139)
    assert sum(p.n_samples for p in parts) == 1711
    assert max(p.n_samples for p in parts) - min(p.n_samples for p in parts) <= 1


def test_partition_deterministic_across_runs():
    data = make_dataset(n=150, f=3, seed=3)
    a_test, a_parts = partition(data, 3, 0.2, seed=9)
    b_test, b_parts = partition(data, 3, 0.2, seed=9)
    assert a_test.features.tobytes() == b_test.features.tobytes()
    for pa, pb in zip(a_parts, b_parts):
        assert pa.features.tobytes() == pb.features.tobytes()
        assert pa.labels.tolist() == pb.labels.tolist()
    c_test, _ = partition(data, 3, 0.2, seed=10)
    assert c_test.features.tobytes() != a_test.features.tobytes()


def test_partition_covers_rows_exactly():
    data = make_dataset(n=97, f=2, seed=4)
    test, parts = partition(data, 3, 0.2, seed=5)
    pieces = [test] + parts
    assert sum(p.n_samples for p in pieces) == 97
    rows = np.vstack([p.features for p in pieces])
    assert (
        np.sort(rows.view([("", rows.dtype)] * rows.shape[1]), axis=0).tobytes()
        == np.sort(
            data.features.view([("", data.features.dtype)] * data.features.shape[1]), axis=0
        ).tobytes()
    )


def test_partition_too_few_rows():
    data = make_dataset(n=6, f=2, seed=5)
    with pytest.raises(TooFewRows):
        partition(data, 10, 0.2, seed=0)


def test_partition_single_class_silo_reports_index():
    X = np.arange(20, dtype=np.float64).reshape(10, 2)
    y = np.array([0] * 9 + [1], dtype=np.int64)
    data = Dataset(("a", "b"), X, y, ("0", "1"))
    with pytest.raises(SingleClassPartition) as err:
        # some 4-way split of 8 train rows must isolate the lone positive
        partition(data, 4, 0.2, seed=1)
    assert 0 <= err.value.silo_index < 4


def test_partition_rejects_bad_arguments():
    data = make_dataset(n=30)
    with pytest.raises(ValueError):
        partition(data, 0, 0.2, seed=0)
    with pytest.raises(ValueError):
        partition(data, 2, 0.0, seed=0)
    with pytest.raises(ValueError):
        partition(data, 2, 1.0, seed=0)


def test_stratified_partition_preserves_ratios():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(600, 2))
    y = (rng.random(600) < 0.3).astype(np.int64)
    data = Dataset(("a", "b"), X, y, ("0", "1"))
    overall = y.mean()
    _, parts = partition(data, 4, 0.2, seed=7, stratify=True)
    for part in parts:
        assert abs(part.labels.mean() - overall) < 0.05
    assert max(p.n_samples for p in parts) - min(p.n_samples for p in parts) <= 1


# --- summaries -----------------------------------------------------------------

def fake_record(mode, n, seed, acc):
    return {
        "mode": mode,
        "n_silos": n,
        "seed": seed,
        "metrics": {"accuracy": acc, "precision": acc, "recall": acc, "f1": acc},
    }


def test_summarize_acc_dev_matches_formula_to_1e9():
    records = [
        fake_record("centralized", 1, 0, 0.9),
        fake_record("centralized", 1, 1, 0.8),
        fake_record("federated", 3, 0, 0.85),
        fake_record("federated", 3, 1, 0.75),
    ]
    rows = summarize(records)
    assert rows[0].mode == "Centralized"
    assert rows[0].acc_dev == 0.0
    c = (0.9 + 0.8) / 2
    a = (0.85 + 0.75) / 2
    assert abs(rows[1].acc_dev - 100.0 * (c - a) / c) <= 1e-9
    assert abs(rows[1].acc_dev - acc_deviation(c, rows[1].accuracy)) <= 1e-9


def test_summarize_requires_baseline():
    with pytest.raises(ValueError):
        summarize([fake_record("federated", 2, 0, 0.5)])


# --- experiment runner ------------------------------------------------------------

def small_config(tmp_path, data_path, **overrides):
    raw = {
        "dataset": str(data_path),
        "target_column": "label",
        "positive_label": "1",
        "silo_counts": [1, 2],
        "seeds": [0, 1],
        "test_fraction": 0.2,
        "model_params": {"n_base_estimators": 8},
        "output_dir": str(tmp_path / "out"),
    }
    raw.update(overrides)
    return config_from_dict(raw)


@pytest.fixture
def csv_dataset(tmp_path):
    from fedrf.dataset import save_dataset

    data = make_dataset(n=150, f=4, seed=12)
    path = tmp_path / "synthetic.csv"
    save_dataset(data, path, target_column="label")
    return path


def test_run_experiment_writes_outputs(tmp_path, csv_dataset):
    config = small_config(tmp_path, csv_dataset)
    rows = run_experiment(config)
    out = config.output_dir
    assert {r.mode for r in rows} == {"Centralized", "1 Silos", "2 Silos"}

    with open(os.path.join(out, "runs.jsonl")) as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) == 2 * (1 + 2)  # seeds x (centralized + 2 sweeps)

    with open(os.path.join(out, "summary.csv")) as fh:
        header = fh.readline().strip().split(",")
    assert header == ["mode", "accuracy", "precision", "recall", "f1", "acc_dev_percent"]
    assert os.path.exists(os.path.join(out, "summary.txt"))
    with open(os.path.join(out, "accuracy_vs_silos.csv")) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "mode,n_silos,accuracy_mean,accuracy_min,accuracy_max"
    assert len(lines) == 1 + 1 + 2  # header + centralized + two silo counts


def test_single_silo_federation_equals_centralized(tmp_path, csv_dataset):
    config = small_config(tmp_path, csv_dataset, silo_counts=[1], seeds=[0, 1, 2])
    run_experiment(config)
    with open(os.path.join(config.output_dir, "runs.jsonl")) as fh:
        records = [json.loads(line) for line in fh]
    by_seed = {}
    for r in records:
        by_seed.setdefault(r["seed"], {})[r["mode"]] = r["metrics"]
    for seed, got in by_seed.items():
        assert got["federated"] == got["centralized"], f"seed {seed}"


def test_config_parsing_defaults():
    config = config_from_dict(
        {
            "dataset": "x.csv",
            "target_column": "y",
            "silo_counts": [3],
            "model_params": {"n_base_estimators": 40, "incremental_rounds": 2,
                             "n_incremental_estimators": 5},
        }
    )
    assert config.seeds == (0, 1, 2, 3, 4)
    assert config.test_fraction == 0.2
    assert config.mode == "inprocess"
    assert config.model_params.n_base_estimators == 40
    assert config.model_params.incremental_rounds == 2


def test_partition_cli_emits_silo_csvs(tmp_path, csv_dataset, capsys):
    out = tmp_path / "parts"
    rc = bench_main(
        [
            "partition",
            "--data", str(csv_dataset),
            "--target", "label",
            "--silos", "3",
            "--test", "0.2",
            "--seed", "4",
            "--out", str(out),
        ]
    )
    assert rc == 0
    info = json.loads(capsys.readouterr().out)
    assert info["test_rows"] == 30
    assert sorted(os.listdir(out)) == ["silo_00.csv", "silo_01.csv", "silo_02.csv", "test.csv"]
    reloaded = load_dataset(out / "silo_00.csv", DataParams("label", (), "1", ("0", "1")))
    assert reloaded.n_samples == info["silo_rows"][0]


# --- local multi-process federations --------------------------------------------

@pytest.mark.slow
def test_spawn_teardown_leaves_no_listeners():
    data = make_dataset(n=80, f=3, seed=20)
    test, parts = partition(data, 1, 0.2, seed=20)
    dp = DataParams("label", (), "1", data.label_names)
    mp = ModelParams(n_base_estimators=4, seed=20)
    with spawn_local_federation(parts, test, mp, dp) as fed:
        clients = connect_clients(fed.plan)
        try:
            result = run_federation(fed.plan, clients=clients)
        finally:
            for c in clients.values():
                c.close()
        assert result.forest.n_trees == 4
    time.sleep(0.3)
    assert fed.ports_closed()


@pytest.mark.slow
def test_killing_a_datasite_mid_run_renormalizes_weights():
    data = make_dataset(n=200, f=3, seed=21)
    test, parts = partition(data, 2, 0.2, seed=21)
    dp = DataParams("label", (), "1", data.label_names)
    mp = ModelParams(n_base_estimators=6, n_incremental_estimators=2,
                     incremental_rounds=1, seed=21)
    with spawn_local_federation(parts, test, mp, dp, timeout_s=60.0) as fed:
        clients = connect_clients(fed.plan)
        victim = fed.processes[1]  # silo_01's datasite

        def sink(report):
            if report.round_index == 0:
                victim.kill()
                victim.wait(timeout=10)

        try:
            result = run_federation(fed.plan, clients=clients, report_sink=sink)
        finally:
            for c in clients.values():
                c.close()
    r0, r1 = result.reports
    assert r0.statuses == {"silo_00": "ok", "silo_01": "ok"}
    assert r1.statuses["silo_01"] in ("failed", "timeout")
    assert r1.resolved_weights == {"silo_00": 1.0}
    assert r1.global_size == 8  # the survivor still grew the global model
