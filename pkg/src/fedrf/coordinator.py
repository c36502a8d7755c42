"""Coordinator: drives federated rounds against datasites and aggregates.

Round 0 asks every train silo for a base forest; each later round sends the
current global forest back for warm-start extension and re-aggregates the
returned forests.  Per-round dispatch is concurrent with a join barrier and
a per-silo deadline; silos that fail or time out are excluded from that
round's aggregation and the surviving weights are renormalized.  The
coordinator exchanges only parameters, serialized models and metrics; it
has no code path that reads raw rows.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass

from .aggregation import (
    AggregationStrategy,
    ClientWeights,
    aggregate,
    concat_aggregate,
    resolve_weights,
)
from .dataset import DataParams
from .errors import (
    ConnectionClosed,
    EvalSiloUnavailable,
    FedRFError,
    MalformedPayload,
    NoSuccessfulClients,
    RemoteError,
    SchemaMismatch,
)
from .forest import Metrics, RandomForest
from .rng import STREAM_ROUND, STREAM_SILO, derive_seed
from .wire import (
    MessageKind,
    ModelParams,
    PROTOCOL_NAME,
    PROTOCOL_VERSION,
    data_params_to_payload,
    decode_payload,
    encode_forest,
    forest_from_b64,
    forest_to_b64,
    frame_read,
    frame_write,
    make_envelope,
    model_params_to_payload,
)


@dataclass(frozen=True)
class SiloSpec:
    silo_id: str
    address: tuple[str, int] | None  # None for in-process silos
    weight: float | None = None
    role: str = "train"

    def __post_init__(self):
        if self.role not in ("train", "eval"):
            raise ValueError("silo role must be 'train' or 'eval'")
        if self.weight is not None and not 0.0 <= self.weight <= 1.0:
            raise ValueError("declared weight must be in [0, 1]")


@dataclass(frozen=True)
class FederationPlan:
    silos: tuple[SiloSpec, ...]
    model_params: ModelParams
    data_params: DataParams
    strategy: AggregationStrategy = AggregationStrategy.UNIFORM
    missing_weight_mode: str = "equal"  # how undeclared weights are filled
    timeout_s: float = 600.0
    concat: bool = False  # debug: concatenate instead of sampling

    def __post_init__(self):
        object.__setattr__(self, "silos", tuple(self.silos))
        object.__setattr__(self, "strategy", AggregationStrategy(self.strategy))
        if self.missing_weight_mode not in ("equal", "proportional"):
            raise ValueError("missing_weight_mode must be 'equal' or 'proportional'")
        if not self.train_silos:
            raise ValueError("plan needs at least one train silo")
        if len([s for s in self.silos if s.role == "eval"]) != 1:
            raise ValueError("plan needs exactly one eval silo")
        declared = [s.weight for s in self.train_silos]
        if all(w is not None for w in declared) and abs(sum(declared) - 1.0) > 1e-9:
            raise ValueError("fully declared weights must sum to 1")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")

    @property
    def train_silos(self) -> tuple[SiloSpec, ...]:
        return tuple(s for s in self.silos if s.role == "train")

    @property
    def eval_silo(self) -> SiloSpec:
        return next(s for s in self.silos if s.role == "eval")

    @property
    def seed(self) -> int:
        return self.model_params.seed


@dataclass
class RoundReport:
    round_index: int
    statuses: dict[str, str]          # silo-id -> ok | failed | timeout
    tree_counts: dict[str, int]       # returned forest sizes of ok silos
    resolved_weights: dict[str, float]
    global_size: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "statuses": self.statuses,
            "tree_counts": self.tree_counts,
            "resolved_weights": self.resolved_weights,
            "global_size": self.global_size,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class FederationResult:
    forest: RandomForest
    reports: list[RoundReport]
    metrics: Metrics


# --------------------------------------------------------------------------
# silo clients
# --------------------------------------------------------------------------

class SiloClientBase:
    """Request/response helpers over an abstract envelope round trip."""

    silo_id: str

    def _roundtrip(self, kind: MessageKind, values: dict) -> tuple[MessageKind, dict]:
        raise NotImplementedError

    def _expect(self, kind: MessageKind, values: dict, want: MessageKind) -> dict:
        got, payload = self._roundtrip(kind, values)
        if got == MessageKind.ERROR:
            raise RemoteError(payload["code"], payload["message"])
        if got != want:
            raise MalformedPayload(f"expected {want.name}, peer sent {got.name}")
        return payload

    def hello(self) -> dict:
        return self._expect(
            MessageKind.HELLO,
            {
                "protocol": PROTOCOL_NAME,
                "version": PROTOCOL_VERSION,
                "role": "coordinator",
                "silo_id": None,
            },
            MessageKind.HELLO,
        )

    def set_data_params(self, params: DataParams) -> None:
        self._expect(
            MessageKind.SET_DATA_PARAMS, data_params_to_payload(params), MessageKind.SET_DATA_PARAMS
        )

    def set_model_params(self, params: ModelParams) -> None:
        self._expect(
            MessageKind.SET_MODEL_PARAMS,
            model_params_to_payload(params),
            MessageKind.SET_MODEL_PARAMS,
        )

    def train(self, round_index: int, seed: int, base: RandomForest | None):
        payload = self._expect(
            MessageKind.TRAIN_REQUEST,
            {
                "round_index": round_index,
                "seed": seed,
                "base_forest": None if base is None else forest_to_b64(base),
            },
            MessageKind.TRAIN_RESPONSE,
        )
        return forest_from_b64(payload["forest"]), payload["n_samples"], payload["n_trees"]

    def evaluate(self, forest: RandomForest) -> Metrics:
        payload = self._expect(
            MessageKind.EVAL_REQUEST, {"forest": forest_to_b64(forest)}, MessageKind.EVAL_RESPONSE
        )
        return Metrics.from_dict(payload)

    def close(self) -> None:
        pass


class TcpSiloClient(SiloClientBase):
    """Blocking framed client; one in-flight request per connection."""

    def __init__(self, silo_id: str, address: tuple[str, int], timeout: float = 600.0,
                 socket_wrap=None):
        self.silo_id = silo_id
        self._sock = socket.create_connection(address, timeout=timeout)
        if socket_wrap is not None:
            self._sock = socket_wrap(self._sock)
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")
        self._next_correlation = 1

    def _roundtrip(self, kind: MessageKind, values: dict) -> tuple[MessageKind, dict]:
        correlation = self._next_correlation
        self._next_correlation += 1
        frame_write(self._wfile, make_envelope(kind, correlation, values))
        while True:
            reply = frame_read(self._rfile)
            if reply.correlation_id != correlation:
                raise MalformedPayload(
                    f"correlation mismatch: sent {correlation}, got {reply.correlation_id}"
                )
            payload = decode_payload(reply.kind, reply.payload)
            if reply.kind == MessageKind.APPROVAL_PENDING:
                continue  # final response follows on the same connection
            return reply.kind, payload

    def close(self) -> None:
        for f in (self._rfile, self._wfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self._sock.close()
        except OSError:
            pass


class InProcessSiloClient(SiloClientBase):
    """Runs a DatasiteCore in this process through the same envelope codecs,
    so in-process and socket federations execute identical handler paths."""

    def __init__(self, silo_id: str, core):
        self.silo_id = silo_id
        self.core = core
        self._next_correlation = 1

    def _roundtrip(self, kind: MessageKind, values: dict) -> tuple[MessageKind, dict]:
        correlation = self._next_correlation
        self._next_correlation += 1
        reply, ticket = self.core.process(make_envelope(kind, correlation, values))
        if ticket is not None:
            ticket.done.wait()
            reply = ticket.result
        return reply.kind, decode_payload(reply.kind, reply.payload)


# --------------------------------------------------------------------------
# federation
# --------------------------------------------------------------------------

def resolve_round_weights(
    plan: FederationPlan,
    successful: set[str],
    n_samples: dict[str, int] | None = None,
) -> ClientWeights:
    """Resolve this round's weights over the silos that completed it.

    Uniform strategy ignores declared weights entirely.  In proportional
    mode the unclaimed mass is pre-split among undeclared survivors in
    proportion to their reported training sample counts, instead of equally.
    """
    if plan.strategy == AggregationStrategy.UNIFORM:
        declared = ClientWeights.all_absent(s.silo_id for s in plan.train_silos)
    else:
        declared = ClientWeights(tuple((s.silo_id, s.weight) for s in plan.train_silos))

    if plan.missing_weight_mode == "proportional":
        if n_samples is None:
            raise ValueError("proportional weight mode requires per-silo sample counts")
        entries = dict(declared.entries)
        absent = [s for s, w in declared.entries if w is None and s in successful]
        present_sum = sum(w for s, w in declared.entries if w is not None and s in successful)
        total = sum(n_samples[s] for s in absent)
        if absent and total > 0:
            remaining = max(0.0, 1.0 - present_sum)
            for s in absent:
                entries[s] = remaining * n_samples[s] / total
        declared = ClientWeights(tuple((s, entries[s]) for s, _ in declared.entries))

    return resolve_weights(declared, successful)


def _dispatch_round(plan, clients, round_index, base):
    """Train all silos concurrently; returns (forests, n_samples, statuses)."""
    round_seed = derive_seed(plan.seed, STREAM_ROUND, round_index)
    train_silos = plan.train_silos
    statuses: dict[str, str] = {}
    forests: dict[str, RandomForest] = {}
    samples: dict[str, int] = {}

    def one(position: int):
        silo = train_silos[position]
        seed = derive_seed(round_seed, STREAM_SILO, position)
        return clients[silo.silo_id].train(round_index, seed, base)

    with ThreadPoolExecutor(max_workers=max(1, len(train_silos))) as pool:
        futures = {}
        for position, silo in enumerate(train_silos):
            if silo.silo_id not in clients:
                statuses[silo.silo_id] = "failed"  # unreachable at start
                continue
            futures[silo.silo_id] = pool.submit(one, position)
        deadline = time.monotonic() + plan.timeout_s
        for silo_id, fut in futures.items():
            try:
                remaining = max(0.0, deadline - time.monotonic())
                forest, n_samples, _ = fut.result(timeout=remaining)
                forests[silo_id] = forest
                samples[silo_id] = n_samples
                statuses[silo_id] = "ok"
            except (FutureTimeout, socket.timeout):
                statuses[silo_id] = "timeout"
                # the abandoned in-flight request poisons the stream: drop it
                clients.pop(silo_id).close()
            except (FedRFError, OSError) as exc:
                statuses[silo_id] = "failed"
                _log_line("silo_failed", silo=silo_id, round=round_index, error=str(exc))
                if isinstance(exc, (OSError, ConnectionClosed)):
                    clients.pop(silo_id).close()
    return forests, samples, statuses


def run_federation(plan: FederationPlan, clients: dict[str, SiloClientBase] | None = None,
                   report_sink=None) -> FederationResult:
    """Run base training plus ``incremental_rounds`` warm-start rounds.

    ``clients`` may supply ready-made silo clients (in-process mode); when
    None, TCP clients are created from the plan addresses.  Deterministic
    for fixed seeds and a fixed set of successful silos.
    """
    own_clients = clients is None
    if clients is None:
        clients = {}
        for silo in plan.silos:
            try:
                clients[silo.silo_id] = TcpSiloClient(
                    silo.silo_id, silo.address, timeout=plan.timeout_s
                )
            except OSError as exc:
                if silo.role == "eval":
                    raise EvalSiloUnavailable(f"cannot connect to eval silo: {exc}") from exc
                _log_line("silo_unreachable", silo=silo.silo_id, error=str(exc))

    try:
        eval_id = plan.eval_silo.silo_id
        if eval_id not in clients:
            raise EvalSiloUnavailable("eval silo has no client")
        try:
            clients[eval_id].hello()
            clients[eval_id].set_data_params(plan.data_params)
        except (FedRFError, OSError) as exc:
            raise EvalSiloUnavailable(str(exc)) from exc

        for silo in plan.train_silos:
            client = clients.get(silo.silo_id)
            if client is None:
                continue
            try:
                client.hello()
                client.set_data_params(plan.data_params)
                client.set_model_params(plan.model_params)
            except (FedRFError, OSError) as exc:
                _log_line("silo_setup_failed", silo=silo.silo_id, error=str(exc))
                clients.pop(silo.silo_id).close()

        reports: list[RoundReport] = []
        global_forest: RandomForest | None = None
        for round_index in range(plan.model_params.incremental_rounds + 1):
            start = time.monotonic()
            forests, samples, statuses = _dispatch_round(plan, clients, round_index, global_forest)
            successful = set(forests)
            if not successful:
                raise NoSuccessfulClients(f"round {round_index}: no silo returned a forest")
            weights = resolve_round_weights(plan, successful, samples)
            round_seed = derive_seed(plan.seed, STREAM_ROUND, round_index)
            ordered = {s: forests[s] for s in weights.silo_ids()}
            if plan.concat:
                global_forest = concat_aggregate(ordered)
            else:
                global_forest = aggregate(ordered, weights, round_seed)
            report = RoundReport(
                round_index=round_index,
                statuses=statuses,
                tree_counts={s: f.n_trees for s, f in forests.items()},
                resolved_weights=dict(weights.entries),
                global_size=global_forest.n_trees,
                wall_time_s=round(time.monotonic() - start, 6),
            )
            reports.append(report)
            if report_sink is not None:
                report_sink(report)

        metrics = evaluate_global(global_forest, clients[eval_id])
        return FederationResult(global_forest, reports, metrics)
    finally:
        if own_clients:
            for client in clients.values():
                client.close()


def evaluate_global(forest: RandomForest, eval_client: SiloClientBase) -> Metrics:
    """Ask the eval silo to score ``forest`` on its entire local data."""
    try:
        return eval_client.evaluate(forest)
    except RemoteError as exc:
        if exc.remote_code == "SchemaMismatch":
            raise SchemaMismatch(str(exc)) from exc
        raise
    except OSError as exc:
        raise EvalSiloUnavailable(str(exc)) from exc


def _log_line(event: str, **fields) -> None:
    record = {"event": event}
    record.update(fields)
    print(json.dumps(record, separators=(",", ":")), file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# plan files and CLI
# --------------------------------------------------------------------------

def plan_from_dict(raw: dict) -> FederationPlan:
    silos = []
    for s in raw["silos"]:
        address = None
        if s.get("address"):
            host, _, port = s["address"].rpartition(":")
            address = (host, int(port))
        silos.append(
            SiloSpec(
                silo_id=s["id"],
                address=address,
                weight=s.get("weight"),
                role=s.get("role", "train"),
            )
        )
    mp = raw["model_params"]
    dp = raw["data_params"]
    return FederationPlan(
        silos=tuple(silos),
        model_params=ModelParams(
            n_base_estimators=mp["n_base_estimators"],
            n_incremental_estimators=mp.get("n_incremental_estimators", 0),
            incremental_rounds=mp.get("incremental_rounds", 0),
            sample_fraction=mp.get("sample_fraction", 1.0),
            seed=mp.get("seed", 0),
        ),
        data_params=DataParams(
            target_column=dp["target_column"],
            ignored_columns=tuple(dp.get("ignored_columns", ())),
            positive_label=dp["positive_label"],
            label_names=tuple(dp.get("label_names", ())),
        ),
        strategy=AggregationStrategy(raw.get("strategy", "uniform")),
        missing_weight_mode=raw.get("missing_weight_mode", "equal"),
        timeout_s=raw.get("timeout_s", 600.0),
        concat=raw.get("concat", False),
    )


def load_plan(path: str) -> FederationPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return plan_from_dict(json.load(fh))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="coordinator", description="Federated RF coordinator")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run a federation described by a plan file")
    run_p.add_argument("--plan", required=True, help="path to the JSON plan")
    run_p.add_argument("--out", default=None, help="write the final model blob here")
    run_p.add_argument("--reports", default=None, help="write round reports (JSONL) here")
    run_p.add_argument(
        "--concat", action="store_true",
        help="debug: aggregate by concatenation instead of weighted sampling",
    )
    args = parser.parse_args(argv)

    plan = load_plan(args.plan)
    if args.concat:
        from dataclasses import replace

        plan = replace(plan, concat=True)

    sink_fh = open(args.reports, "w", encoding="utf-8") if args.reports else None

    def sink(report: RoundReport) -> None:
        line = json.dumps(report.to_dict(), separators=(",", ":"))
        print(line, flush=True)
        if sink_fh:
            sink_fh.write(line + "\n")
            sink_fh.flush()

    try:
        result = run_federation(plan, report_sink=sink)
    finally:
        if sink_fh:
            sink_fh.close()

    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(encode_forest(result.forest))
    print(json.dumps({"final_metrics": result.metrics.to_dict()}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
