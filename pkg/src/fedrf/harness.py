"""Experiment harness: silo partitioning, sweeps, and local federations.

``partition`` shuffles the rows of one CSV-backed dataset by seed, assigns
the first ceil(test_fraction*n) rows to the test silo and splits the rest
into near-equal contiguous train silos.  ``run_experiment`` sweeps silo
counts over several seeds, runs a schedule-faithful centralized baseline
next to each federated variant, and writes machine- and human-readable
result tables plus an accuracy-vs-silo-count data file.

Federations run either in-process (same modules, no sockets) or as real
datasite subprocesses; both modes execute the same handler code and must
produce identical metrics for the same seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, replace

from .coordinator import (
    FederationPlan,
    FederationResult,
    InProcessSiloClient,
    SiloSpec,
    TcpSiloClient,
    run_federation,
)
from .dataset import DataParams, Dataset, infer_label_names, load_dataset, save_dataset
from .datasite import DatasiteCore
from .errors import (
    ChildProcessFailure,
    EvalSiloUnavailable,
    SingleClassPartition,
    TooFewRows,
)
from .forest import ForestParams, Metrics, evaluate, fit_forest, warm_start_extend
from .rng import STREAM_PARTITION, STREAM_ROUND, STREAM_SILO, SplitMix64, derive_seed
from .wire import ModelParams


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------

def _stratified_order(data: Dataset, rng: SplitMix64) -> list[int]:
    # shuffle within each class, then interleave classes by largest-remainder
    # scheduling so every contiguous slice keeps roughly the global ratios
    groups: dict[int, list[int]] = {}
    for i, label in enumerate(data.labels):
        groups.setdefault(int(label), []).append(i)
    for c in sorted(groups):
        rng.shuffle(groups[c])
    n = data.n_samples
    share = {c: len(g) / n for c, g in groups.items()}
    credit = {c: 0.0 for c in groups}
    cursors = {c: 0 for c in groups}
    order = []
    for _ in range(n):
        for c in credit:
            if cursors[c] < len(groups[c]):
                credit[c] += share[c]
        pick = max(
            (c for c in sorted(groups) if cursors[c] < len(groups[c])),
            key=lambda c: credit[c],
        )
        credit[pick] -= 1.0
        order.append(groups[pick][cursors[pick]])
        cursors[pick] += 1
    return order


def partition(
    data: Dataset,
    n_silos: int,
    test_fraction: float,
    seed: int,
    stratify: bool = False,
) -> tuple[Dataset, list[Dataset]]:
    """Shuffle by seed, carve off the test silo, split the rest evenly.

    Returns (test, train_parts); parts differ in size by at most one row and
    together with the test set cover the input rows exactly.
    """
    if n_silos < 1:
        raise ValueError("n_silos must be >= 1")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = data.n_samples
    rng = SplitMix64(derive_seed(seed, STREAM_PARTITION))
    if stratify:
        order = _stratified_order(data, rng)
    else:
        order = list(range(n))
        rng.shuffle(order)

    n_test = math.ceil(test_fraction * n)
    rest = order[n_test:]
    if n_test == 0 or len(rest) < n_silos:
        raise TooFewRows(
            f"{n} rows cannot supply a {test_fraction:.0%} test set and {n_silos} non-empty silos"
        )
    test = data.take(order[:n_test])

    base, extra = divmod(len(rest), n_silos)
    parts = []
    at = 0
    for i in range(n_silos):
        size = base + (1 if i < extra else 0)
        part = data.take(rest[at : at + size])
        at += size
        if len(set(part.labels.tolist())) < 2:
            raise SingleClassPartition(i)
        parts.append(part)
    return test, parts


# --------------------------------------------------------------------------
# experiment configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    target_column: str
    silo_counts: tuple[int, ...]
    positive_label: str = "1"
    ignored_columns: tuple[str, ...] = ()
    label_names: tuple[str, ...] = ()     # empty: infer from the CSV
    test_fraction: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    model_params: ModelParams = ModelParams(n_base_estimators=100)
    strategy: str = "uniform"
    mode: str = "inprocess"               # or "subprocess"
    stratify: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        object.__setattr__(self, "silo_counts", tuple(self.silo_counts))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "ignored_columns", tuple(self.ignored_columns))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        if not self.silo_counts or min(self.silo_counts) < 1:
            raise ValueError("silo_counts must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.mode not in ("inprocess", "subprocess"):
            raise ValueError("mode must be 'inprocess' or 'subprocess'")


def config_from_dict(raw: dict) -> ExperimentConfig:
    mp = dict(raw.get("model_params", {}))
    mp.setdefault("n_base_estimators", 100)
    return ExperimentConfig(
        dataset=raw["dataset"],
        target_column=raw["target_column"],
        silo_counts=tuple(raw["silo_counts"]),
        positive_label=str(raw.get("positive_label", "1")),
        ignored_columns=tuple(raw.get("ignored_columns", ())),
        label_names=tuple(raw.get("label_names") or ()),
        test_fraction=raw.get("test_fraction", 0.2),
        seeds=tuple(raw.get("seeds", (0, 1, 2, 3, 4))),
        model_params=ModelParams(
            n_base_estimators=mp["n_base_estimators"],
            n_incremental_estimators=mp.get("n_incremental_estimators", 0),
            incremental_rounds=mp.get("incremental_rounds", 0),
            sample_fraction=mp.get("sample_fraction", 1.0),
        ),
        strategy=raw.get("strategy", "uniform"),
        mode=raw.get("mode", "inprocess"),
        stratify=raw.get("stratify", False),
        output_dir=raw.get("output_dir", "results"),
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


@dataclass(frozen=True)
class ResultRow:
    mode: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    acc_dev: float  # percent deviation from the centralized mean


# --------------------------------------------------------------------------
# single runs
# --------------------------------------------------------------------------

def centralized_run(
    train: Dataset, test: Dataset, model_params: ModelParams, positive_label: int
) -> Metrics:
    """Schedule-faithful baseline: one model follows the same base +
    incremental schedule and seed derivation as a single-silo federation."""
    round_seed = derive_seed(model_params.seed, STREAM_ROUND, 0)
    silo_seed = derive_seed(round_seed, STREAM_SILO, 0)
    forest = fit_forest(
        train, ForestParams(n_estimators=model_params.n_base_estimators, seed=silo_seed)
    )
    for k in range(1, model_params.incremental_rounds + 1):
        round_seed = derive_seed(model_params.seed, STREAM_ROUND, k)
        silo_seed = derive_seed(round_seed, STREAM_SILO, 0)
        forest = warm_start_extend(
            forest, train, model_params.n_incremental_estimators, silo_seed
        )
    return evaluate(forest, test, positive_label)


def _train_silo_specs(n_silos: int) -> list[SiloSpec]:
    return [SiloSpec(f"silo_{i:02d}", None, None, "train") for i in range(n_silos)]


def build_plan(
    n_silos: int,
    model_params: ModelParams,
    data_params: DataParams,
    strategy: str = "uniform",
    addresses: dict[str, tuple[str, int]] | None = None,
    timeout_s: float = 600.0,
) -> FederationPlan:
    silos = _train_silo_specs(n_silos) + [SiloSpec("eval", None, None, "eval")]
    if addresses:
        silos = [replace(s, address=addresses[s.silo_id]) for s in silos]
    return FederationPlan(
        silos=tuple(silos),
        model_params=model_params,
        data_params=data_params,
        strategy=strategy,
        timeout_s=timeout_s,
    )


def run_inprocess_federation(
    parts: list[Dataset], test: Dataset, plan: FederationPlan
) -> FederationResult:
    """Federation over DatasiteCore objects in this process (no sockets)."""
    clients = {}
    for spec, part in zip(plan.train_silos, parts):
        core = DatasiteCore.from_dataset(part, silo_id=spec.silo_id, approval="auto")
        clients[spec.silo_id] = InProcessSiloClient(spec.silo_id, core)
    eval_core = DatasiteCore.from_dataset(test, silo_id="eval", approval="auto")
    clients["eval"] = InProcessSiloClient("eval", eval_core)
    return run_federation(plan, clients=clients)


# --------------------------------------------------------------------------
# subprocess federations
# --------------------------------------------------------------------------

@dataclass
class LocalFederation:
    """Running datasite child processes plus the plan that targets them."""

    plan: FederationPlan
    processes: list[subprocess.Popen]
    log_paths: list[str]
    workdir: str
    _own_workdir: bool = False

    def shutdown(self) -> None:
        for p in self.processes:
            if p.poll() is None:
                p.terminate()
        for p in self.processes:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait(timeout=10)
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def ports_closed(self) -> bool:
        for spec in self.plan.silos:
            try:
                with socket.create_connection(spec.address, timeout=0.5):
                    return False
            except OSError:
                continue
        return True

    def captured_logs(self) -> str:
        chunks = []
        for path in self.log_paths:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    chunks.append(f"--- {path} ---\n{fh.read()}")
            except OSError:
                pass
        return "\n".join(chunks)

    def __enter__(self) -> "LocalFederation":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def _wait_for_listening(log_path: str, proc: subprocess.Popen, timeout: float = 60.0) -> int:
    """Parse the datasite's structured 'listening' event for its bound port."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            break
        try:
            with open(log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError:
                        continue
                    if record.get("event") == "listening":
                        return record["port"]
        except OSError:
            pass
        time.sleep(0.05)
    logs = ""
    try:
        with open(log_path, "r", encoding="utf-8") as fh:
            logs = fh.read()
    except OSError:
        pass
    raise ChildProcessFailure(f"datasite never reported listening ({log_path})", logs)


def spawn_local_federation(
    parts: list[Dataset],
    test: Dataset,
    model_params: ModelParams,
    data_params: DataParams,
    strategy: str = "uniform",
    workdir: str | None = None,
    timeout_s: float = 600.0,
) -> LocalFederation:
    """Write per-silo CSVs, launch one auto-approve datasite process per silo
    (plus the eval silo), and return a handle whose plan targets them.

    Silo CSVs are written with round-trip-exact floats, so subprocess runs
    reproduce in-process runs bit-for-bit.  Datasites bind ephemeral ports
    and report them through their structured logs.
    """
    own_workdir = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix="fedrf_")
    os.makedirs(workdir, exist_ok=True)

    datasets = {f"silo_{i:02d}": part for i, part in enumerate(parts)}
    datasets["eval"] = test
    processes: list[subprocess.Popen] = []
    log_paths: list[str] = []
    addresses: dict[str, tuple[str, int]] = {}
    fed = LocalFederation(None, processes, log_paths, workdir, own_workdir)  # plan set below
    try:
        for silo_id, data in datasets.items():
            csv_path = os.path.join(workdir, f"{silo_id}.csv")
            save_dataset(data, csv_path, target_column=data_params.target_column)
            log_path = os.path.join(workdir, f"{silo_id}.log")
            log_paths.append(log_path)
            cmd = [
                sys.executable,
                "-m",
                "fedrf.datasite",
                "--listen",
                "127.0.0.1:0",
                "--data",
                csv_path,
                "--target",
                data_params.target_column,
                "--positive-label",
                data_params.positive_label,
                "--approval",
                "auto",
                "--admin",
                "127.0.0.1:0",
                "--silo-id",
                silo_id,
                "--log-file",
                log_path,
            ]
            proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            processes.append(proc)
        for silo_id, log_path in zip(datasets.keys(), log_paths):
            proc = processes[log_paths.index(log_path)]
            port = _wait_for_listening(log_path, proc)
            addresses[silo_id] = ("127.0.0.1", port)
    except Exception:
        fed.shutdown()
        raise

    plan = build_plan(
        len(parts), model_params, replace(data_params, ignored_columns=()),
        strategy, addresses, timeout_s,
    )
    fed.plan = plan
    return fed


def connect_clients(plan: FederationPlan, socket_wrap=None) -> dict[str, TcpSiloClient]:
    """TCP clients for every silo in the plan; eval connectivity is mandatory."""
    clients: dict[str, TcpSiloClient] = {}
    for spec in plan.silos:
        try:
            clients[spec.silo_id] = TcpSiloClient(
                spec.silo_id, spec.address, timeout=plan.timeout_s, socket_wrap=socket_wrap
            )
        except OSError as exc:
            if spec.role == "eval":
                raise EvalSiloUnavailable(str(exc)) from exc
    return clients


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def run_single(
    config: ExperimentConfig,
    data: Dataset,
    data_params: DataParams,
    n_silos: int,
    seed: int,
) -> FederationResult:
    """One federated run at (n_silos, seed) in the configured mode."""
    test, parts = partition(data, n_silos, config.test_fraction, seed, config.stratify)
    model_params = replace(config.model_params, seed=seed)
    if config.mode == "inprocess":
        plan = build_plan(n_silos, model_params, data_params, config.strategy)
        return run_inprocess_federation(parts, test, plan)
    with spawn_local_federation(
        parts, test, model_params, data_params, config.strategy
    ) as fed:
        clients = connect_clients(fed.plan)
        try:
            return run_federation(fed.plan, clients=clients)
        finally:
            for client in clients.values():
                client.close()


def acc_deviation(acc_centralized: float, acc_mode: float) -> float:
    return 100.0 * (acc_centralized - acc_mode) / acc_centralized


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def summarize(records: list[dict]) -> list[ResultRow]:
    """Seed-averaged table rows; acc_dev is measured against the
    centralized mean over the same seed set."""
    central = [r for r in records if r["mode"] == "centralized"]
    if not central:
        raise ValueError("no centralized baseline runs recorded")
    c_acc = _mean(r["metrics"]["accuracy"] for r in central)
    rows = [
        ResultRow(
            "Centralized",
            accuracy=c_acc,
            precision=_mean(r["metrics"]["precision"] for r in central),
            recall=_mean(r["metrics"]["recall"] for r in central),
            f1=_mean(r["metrics"]["f1"] for r in central),
            acc_dev=0.0,
        )
    ]
    silo_counts = sorted({r["n_silos"] for r in records if r["mode"] == "federated"})
    for n in silo_counts:
        group = [r for r in records if r["mode"] == "federated" and r["n_silos"] == n]
        acc = _mean(r["metrics"]["accuracy"] for r in group)
        rows.append(
            ResultRow(
                f"{n} Silos",
                accuracy=acc,
                precision=_mean(r["metrics"]["precision"] for r in group),
                recall=_mean(r["metrics"]["recall"] for r in group),
                f1=_mean(r["metrics"]["f1"] for r in group),
                acc_dev=acc_deviation(c_acc, acc),
            )
        )
    return rows


def _write_summary_files(rows: list[ResultRow], records: list[dict], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("mode,accuracy,precision,recall,f1,acc_dev_percent\n")
        for r in rows:
            fh.write(
                f"{r.mode},{r.accuracy:.6f},{r.precision:.6f},{r.recall:.6f},"
                f"{r.f1:.6f},{r.acc_dev:.6f}\n"
            )
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{'Mode':<14}{'Accuracy':>10}{'Precision':>11}{'Recall':>9}"
                 f"{'F1':>9}{'Acc Dev':>10}\n")
        for r in rows:
            fh.write(
                f"{r.mode:<14}{r.accuracy:>10.4f}{r.precision:>11.4f}{r.recall:>9.4f}"
                f"{r.f1:>9.4f}{r.acc_dev:>9.2f}%\n"
            )
    by_n: dict[int, list[float]] = {}
    for r in records:
        if r["mode"] == "federated":
            by_n.setdefault(r["n_silos"], []).append(r["metrics"]["accuracy"])
    central_acc = [r["metrics"]["accuracy"] for r in records if r["mode"] == "centralized"]
    with open(os.path.join(out_dir, "accuracy_vs_silos.csv"), "w", encoding="utf-8") as fh:
        fh.write("mode,n_silos,accuracy_mean,accuracy_min,accuracy_max\n")
        if central_acc:
            fh.write(
                f"centralized,,{_mean(central_acc):.6f},"
                f"{min(central_acc):.6f},{max(central_acc):.6f}\n"
            )
        for n in sorted(by_n):
            accs = by_n[n]
            fh.write(f"federated,{n},{_mean(accs):.6f},{min(accs):.6f},{max(accs):.6f}\n")


def run_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Full sweep: per seed, a centralized baseline plus every silo count.

    Per-run records stream to runs.jsonl as they finish, so partial results
    survive a failure.  Summary tables are written at the end.
    """
    label_names = config.label_names or infer_label_names(config.dataset, config.target_column)
    data_params = DataParams(
        target_column=config.target_column,
        ignored_columns=config.ignored_columns,
        positive_label=config.positive_label,
        label_names=label_names,
    )
    data = load_dataset(config.dataset, data_params)
    positive_id = data_params.positive_class_id()

    os.makedirs(config.output_dir, exist_ok=True)
    records: list[dict] = []
    runs_path = os.path.join(config.output_dir, "runs.jsonl")
    with open(runs_path, "w", encoding="utf-8") as runs_fh:

        def record(entry: dict) -> None:
            records.append(entry)
            runs_fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
            runs_fh.flush()

        try:
            for seed in config.seeds:
                test, train_parts = partition(data, 1, config.test_fraction, seed,
                                              config.stratify)
                started = time.monotonic()
                metrics = centralized_run(
                    train_parts[0], test, replace(config.model_params, seed=seed), positive_id
                )
                record(
                    {
                        "mode": "centralized",
                        "n_silos": 1,
                        "seed": seed,
                        "metrics": metrics.to_dict(),
                        "wall_time_s": round(time.monotonic() - started, 3),
                    }
                )
                for n in config.silo_counts:
                    started = time.monotonic()
                    result = run_single(config, data, data_params, n, seed)
                    record(
                        {
                            "mode": "federated",
                            "n_silos": n,
                            "seed": seed,
                            "metrics": result.metrics.to_dict(),
                            "global_size": result.forest.n_trees,
                            "rounds": [r.to_dict() for r in result.reports],
                            "wall_time_s": round(time.monotonic() - started, 3),
                        }
                    )
        finally:
            # whatever completed is already on disk; summarize it if possible
            if records:
                try:
                    _write_summary_files(summarize(records), records, config.output_dir)
                except ValueError:
                    pass
    return summarize(records)


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedrf-bench", description="Federated RF experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the sweep described by a config file")
    run_p.add_argument("--config", required=True)

    part_p = sub.add_parser("partition", help="emit per-silo CSVs for a dataset")
    part_p.add_argument("--data", required=True)
    part_p.add_argument("--target", required=True)
    part_p.add_argument("--ignore", default="")
    part_p.add_argument("--silos", type=int, required=True)
    part_p.add_argument("--test", type=float, default=0.2)
    part_p.add_argument("--seed", type=int, default=0)
    part_p.add_argument("--stratify", action="store_true")
    part_p.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "partition":
        ignored = tuple(c for c in args.ignore.split(",") if c)
        label_names = infer_label_names(args.data, args.target)
        params = DataParams(args.target, ignored, label_names[-1], label_names)
        data = load_dataset(args.data, params)
        test, parts = partition(data, args.silos, args.test, args.seed, args.stratify)
        os.makedirs(args.out, exist_ok=True)
        save_dataset(test, os.path.join(args.out, "test.csv"), args.target)
        for i, part in enumerate(parts):
            save_dataset(part, os.path.join(args.out, f"silo_{i:02d}.csv"), args.target)
        print(
            json.dumps(
                {
                    "test_rows": test.n_samples,
                    "silo_rows": [p.n_samples for p in parts],
                    "out": args.out,
                }
            )
        )
        return 0

    config = load_config(args.config)
    try:
        rows = run_experiment(config)
    except Exception as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 1
    for row in rows:
        print(
            f"{row.mode:<14} acc={row.accuracy:.4f} prec={row.precision:.4f} "
            f"rec={row.recall:.4f} f1={row.f1:.4f} dev={row.acc_dev:.2f}%"
        )
    print(f"results written to {config.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
