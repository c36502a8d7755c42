"""Datasite: the service that owns one private CSV and trains on request.

Every training or evaluation request passes an approval gate.  Under the
``auto`` policy requests execute immediately; under ``manual`` they are
parked in the queue, the requester receives APPROVAL_PENDING, and an
``approve``/``reject`` command on the local admin socket releases them.
Approved requests execute exactly once and respond on their original
connection.  Only serialized models and metrics are ever written back; no
message schema can carry rows (see fedrf.wire).
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .dataset import DataParams, Dataset, load_dataset
from .errors import (
    CorruptModel,
    DatasetError,
    FedRFError,
    ForestError,
    MalformedPayload,
    NotApproved,
    NotConfigured,
    SchemaMismatch,
    StaleRound,
    TrainingFailed,
    UnknownRequestId,
    WireError,
)
from .forest import ForestParams, RandomForest, evaluate, fit_forest, warm_start_extend
from .rng import STREAM_SUBSAMPLE, SplitMix64, derive_seed
from .wire import (
    Envelope,
    MessageKind,
    ModelParams,
    PROTOCOL_NAME,
    PROTOCOL_VERSION,
    data_params_from_payload,
    decode_payload,
    error_envelope,
    forest_from_b64,
    forest_to_b64,
    frame_read,
    frame_write,
    make_envelope,
    model_params_from_payload,
)

_log_lock = threading.Lock()


def log_event(stream, event: str, **fields) -> None:
    """One structured record per line; timestamps are epoch seconds."""
    record = {"ts": round(time.time(), 3), "event": event}
    record.update(fields)
    with _log_lock:
        stream.write(json.dumps(record, separators=(",", ":")) + "\n")
        stream.flush()


@dataclass
class PendingRequest:
    request_id: int
    summary: str
    received_at: float
    envelope: Envelope
    done: threading.Event = field(default_factory=threading.Event)
    result: Optional[Envelope] = None


class ApprovalQueue:
    """Thread-safe gate; in manual mode nothing executes before approve()."""

    def __init__(self, policy: str = "auto"):
        if policy not in ("auto", "manual"):
            raise ValueError("approval policy must be 'auto' or 'manual'")
        self.policy = policy
        self._lock = threading.Lock()
        self._next_id = 1
        self._pending: dict[int, PendingRequest] = {}

    def submit(self, envelope: Envelope, summary: str) -> PendingRequest:
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            entry = PendingRequest(request_id, summary, time.time(), envelope)
            self._pending[request_id] = entry
            return entry

    def _pop(self, request_id: int) -> PendingRequest:
        entry = self._pending.pop(request_id, None)
        if entry is None:
            raise UnknownRequestId(f"no pending request with id {request_id}")
        return entry

    def take_approved(self, request_id: int) -> PendingRequest:
        with self._lock:
            return self._pop(request_id)

    def take_rejected(self, request_id: int) -> PendingRequest:
        with self._lock:
            return self._pop(request_id)

    def pending(self) -> list[dict]:
        with self._lock:
            return [
                {"id": e.request_id, "summary": e.summary, "received_at": e.received_at}
                for e in sorted(self._pending.values(), key=lambda e: e.request_id)
            ]


class DatasiteCore:
    """Protocol state machine, shared by the TCP server and in-process mode.

    ``loader`` turns coordinator-supplied DataParams into the local Dataset;
    the dataset and data params are immutable once set.  Training requests
    execute serially under one lock.
    """

    def __init__(
        self,
        silo_id: str,
        loader: Callable[[DataParams], Dataset],
        approval: str = "auto",
        declared_target: str | None = None,
        log_stream=None,
    ):
        self.silo_id = silo_id
        self._loader = loader
        self._declared_target = declared_target
        self.queue = ApprovalQueue(approval)
        self._log_stream = log_stream
        self._config_lock = threading.Lock()
        self._exec_lock = threading.Lock()
        self.data_params: DataParams | None = None
        self.dataset: Dataset | None = None
        self.model_params: ModelParams | None = None
        self.current_model: RandomForest | None = None
        self.round_index = 0

    @classmethod
    def from_csv(cls, path, *, silo_id, approval="auto", declared_target=None, log_stream=None):
        return cls(
            silo_id,
            loader=lambda params: load_dataset(path, params),
            approval=approval,
            declared_target=declared_target,
            log_stream=log_stream,
        )

    @classmethod
    def from_dataset(cls, data: Dataset, *, silo_id, approval="auto", log_stream=None):
        def loader(params: DataParams) -> Dataset:
            if tuple(params.label_names) != data.label_names:
                raise SchemaMismatch("coordinator label table differs from local dataset")
            return data

        return cls(silo_id, loader=loader, approval=approval, log_stream=log_stream)

    def _log(self, event: str, **fields) -> None:
        if self._log_stream is not None:
            log_event(self._log_stream, event, silo=self.silo_id, **fields)

    # -- message dispatch ---------------------------------------------------

    def process(self, env: Envelope) -> tuple[Envelope, Optional[PendingRequest]]:
        """Handle one request envelope.

        Returns (reply, ticket).  ``ticket`` is non-None only when the
        request was parked for manual approval; the transport must then wait
        on ticket.done and send ticket.result as the final response.
        """
        self._log("request", kind=env.kind.name, correlation_id=env.correlation_id)
        try:
            values = decode_payload(env.kind, env.payload)
        except (MalformedPayload, KeyError) as exc:
            return error_envelope(env.correlation_id, "MalformedPayload", str(exc)), None

        try:
            if env.kind == MessageKind.HELLO:
                return self._handle_hello(env, values), None
            if env.kind == MessageKind.SET_DATA_PARAMS:
                return self._handle_set_data_params(env, values), None
            if env.kind == MessageKind.SET_MODEL_PARAMS:
                return self._handle_set_model_params(env, values), None
            if env.kind == MessageKind.TRAIN_REQUEST:
                return self._gate(env, self._train_summary(values))
            if env.kind == MessageKind.EVAL_REQUEST:
                return self._gate(env, "evaluate forest on local data")
            return (
                error_envelope(
                    env.correlation_id, "MalformedPayload", f"{env.kind.name} is not a request"
                ),
                None,
            )
        except FedRFError as exc:
            self._log("error", code=exc.code, message=str(exc))
            return error_envelope(env.correlation_id, exc.code, str(exc)), None
        except Exception as exc:  # internal bug: never leak a traceback on the wire
            self._log("error", code="Internal", message=repr(exc))
            return error_envelope(env.correlation_id, "Internal", "internal error"), None

    def _train_summary(self, values: dict) -> str:
        mp = self.model_params
        if values.get("base_forest") is None:
            n = mp.n_base_estimators if mp else "?"
            return f"train base forest ({n} trees), round {values['round_index']}"
        n = mp.n_incremental_estimators if mp else "?"
        return f"extend forest by {n} trees, round {values['round_index']}"

    def _gate(self, env: Envelope, summary: str) -> tuple[Envelope, Optional[PendingRequest]]:
        if self.queue.policy == "auto":
            return self._execute(env), None
        entry = self.queue.submit(env, summary)
        self._log("approval_pending", request_id=entry.request_id, summary=summary)
        pending = make_envelope(
            MessageKind.APPROVAL_PENDING, env.correlation_id, {"request_id": entry.request_id}
        )
        return pending, entry

    def approve(self, request_id: int) -> None:
        """Execute a parked request and release its connection."""
        entry = self.queue.take_approved(request_id)
        self._log("approved", request_id=request_id)
        entry.result = self._execute(entry.envelope)
        entry.done.set()

    def reject(self, request_id: int) -> None:
        entry = self.queue.take_rejected(request_id)
        self._log("rejected", request_id=request_id)
        entry.result = error_envelope(
            entry.envelope.correlation_id, "Rejected", "request rejected by data owner"
        )
        entry.done.set()

    # -- handlers -------------------------------------------------------------

    def _handle_hello(self, env: Envelope, values: dict) -> Envelope:
        if values["protocol"] != PROTOCOL_NAME or values["version"] != PROTOCOL_VERSION:
            return error_envelope(
                env.correlation_id,
                "UnsupportedVersion",
                f"datasite speaks {PROTOCOL_NAME} v{PROTOCOL_VERSION}",
            )
        return make_envelope(
            MessageKind.HELLO,
            env.correlation_id,
            {
                "protocol": PROTOCOL_NAME,
                "version": PROTOCOL_VERSION,
                "role": "datasite",
                "silo_id": self.silo_id,
            },
        )

    def _handle_set_data_params(self, env: Envelope, values: dict) -> Envelope:
        params = data_params_from_payload(values)
        with self._config_lock:
            if self.data_params is not None:
                if params == self.data_params:
                    return make_envelope(env.kind, env.correlation_id, {"ok": True})
                raise SchemaMismatch("data params are immutable once set")
            if self._declared_target is not None and params.target_column != self._declared_target:
                raise SchemaMismatch(
                    f"coordinator target column {params.target_column!r} differs from "
                    f"local declaration {self._declared_target!r}"
                )
            params.positive_class_id()  # validates positive_label against the table
            dataset = self._loader(params)
            self.data_params = params
            self.dataset = dataset
            self._log("configured", n_samples=dataset.n_samples, n_features=dataset.n_features)
        return make_envelope(env.kind, env.correlation_id, {"ok": True})

    def _handle_set_model_params(self, env: Envelope, values: dict) -> Envelope:
        params = model_params_from_payload(values)
        with self._config_lock:
            if self.round_index > 0 and params != self.model_params:
                raise StaleRound("model params cannot change after training has started")
            self.model_params = params
        return make_envelope(env.kind, env.correlation_id, {"ok": True})

    def _execute(self, env: Envelope) -> Envelope:
        try:
            values = decode_payload(env.kind, env.payload)
            if env.kind == MessageKind.TRAIN_REQUEST:
                payload = self._execute_train(values)
                reply = make_envelope(MessageKind.TRAIN_RESPONSE, env.correlation_id, payload)
            else:
                payload = self._execute_eval(values)
                reply = make_envelope(MessageKind.EVAL_RESPONSE, env.correlation_id, payload)
            self._log("response", kind=reply.kind.name, correlation_id=env.correlation_id)
            return reply
        except FedRFError as exc:
            self._log("error", code=exc.code, message=str(exc))
            return error_envelope(env.correlation_id, exc.code, str(exc))
        except Exception as exc:
            self._log("error", code="Internal", message=repr(exc))
            return error_envelope(env.correlation_id, "Internal", "internal error")

    def _training_rows(self, seed: int) -> Dataset:
        data = self.dataset
        fraction = self.model_params.sample_fraction
        if fraction >= 1.0:
            return data
        k = max(1, int(fraction * data.n_samples))
        rng = SplitMix64(derive_seed(seed, STREAM_SUBSAMPLE))
        picked = sorted(rng.sample_without_replacement(data.n_samples, k))
        return data.take(picked)

    def _execute_train(self, values: dict) -> dict:
        with self._exec_lock:
            if self.data_params is None or self.model_params is None:
                raise NotConfigured("data and model params must be set before training")
            if values["round_index"] != self.round_index:
                raise StaleRound(
                    f"request is for round {values['round_index']}, silo is at round "
                    f"{self.round_index}"
                )
            seed = values["seed"]
            train_data = self._training_rows(seed)
            if values["base_forest"] is None:
                params = ForestParams(
                    n_estimators=self.model_params.n_base_estimators, seed=seed
                )
                try:
                    forest = fit_forest(train_data, params)
                except SchemaMismatch:
                    raise
                except (ForestError, DatasetError) as exc:
                    raise TrainingFailed(f"{exc.code}: {exc}") from exc
            else:
                try:
                    base = forest_from_b64(values["base_forest"])
                except (WireError, MalformedPayload) as exc:
                    raise TrainingFailed(f"CorruptModel: {exc}") from exc
                try:
                    forest = warm_start_extend(
                        base, train_data, self.model_params.n_incremental_estimators, seed
                    )
                except SchemaMismatch:
                    raise
                except (ForestError, DatasetError) as exc:
                    raise TrainingFailed(f"{exc.code}: {exc}") from exc
            self.round_index += 1
            self.current_model = forest
            return {
                "n_samples": train_data.n_samples,
                "n_trees": forest.n_trees,
                "forest": forest_to_b64(forest),
            }

    def _execute_eval(self, values: dict) -> dict:
        with self._exec_lock:
            if self.data_params is None:
                raise NotConfigured("data params must be set before evaluation")
            try:
                forest = forest_from_b64(values["forest"])
            except (WireError, MalformedPayload) as exc:
                raise CorruptModel(str(exc)) from exc
            metrics = evaluate(forest, self.dataset, self.data_params.positive_class_id())
            return metrics.to_dict()

    # -- direct (in-process) API ----------------------------------------------

    def handle_train(self, values: dict) -> dict:
        """Direct form of TRAIN_REQUEST.

        Under manual approval the request is parked and NotApproved raised;
        it will execute when approve(request_id) is called.
        """
        if self.queue.policy == "manual":
            env = make_envelope(MessageKind.TRAIN_REQUEST, 0, values)
            entry = self.queue.submit(env, self._train_summary(values))
            raise NotApproved(f"request {entry.request_id} parked pending approval")
        return self._execute_train(values)

    def handle_eval(self, values: dict) -> dict:
        """Direct form of EVAL_REQUEST; same gating as handle_train."""
        if self.queue.policy == "manual":
            env = make_envelope(MessageKind.EVAL_REQUEST, 0, values)
            entry = self.queue.submit(env, "evaluate forest on local data")
            raise NotApproved(f"request {entry.request_id} parked pending approval")
        return self._execute_eval(values)


# --------------------------------------------------------------------------
# servers
# --------------------------------------------------------------------------

class DatasiteServer:
    """TCP front (framed envelopes) plus a localhost admin socket (JSON lines)."""

    def __init__(self, core: DatasiteCore, listen: tuple[str, int], admin: tuple[str, int]):
        self.core = core
        self._listen_sock = socket.create_server(listen, reuse_port=False)
        self._admin_sock = socket.create_server(admin, reuse_port=False)
        self._closed = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        return self._listen_sock.getsockname()[:2]

    @property
    def admin_address(self) -> tuple[str, int]:
        return self._admin_sock.getsockname()[:2]

    def serve_forever(self) -> None:
        threading.Thread(target=self._admin_loop, daemon=True).start()
        self.core._log(
            "listening",
            port=self.address[1],
            admin_port=self.admin_address[1],
            approval=self.core.queue.policy,
        )
        while not self._closed.is_set():
            try:
                conn, peer = self._listen_sock.accept()
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn, peer), daemon=True).start()

    def shutdown(self) -> None:
        self._closed.set()
        for sock in (self._listen_sock, self._admin_sock):
            try:
                sock.close()
            except OSError:
                pass

    def _serve_conn(self, conn: socket.socket, peer) -> None:
        from .errors import ConnectionClosed, FramingError

        rfile = conn.makefile("rb")
        wfile = conn.makefile("wb")
        try:
            while True:
                try:
                    env = frame_read(rfile)
                except ConnectionClosed:
                    break
                except FramingError as exc:
                    # stream sync is lost: report once, then drop the connection
                    try:
                        frame_write(wfile, error_envelope(0, exc.code, str(exc)))
                    except OSError:
                        pass
                    break
                reply, ticket = self.core.process(env)
                frame_write(wfile, reply)
                if ticket is not None:
                    ticket.done.wait()
                    frame_write(wfile, ticket.result)
        except OSError:
            pass
        finally:
            for f in (rfile, wfile):
                try:
                    f.close()
                except OSError:
                    pass
            try:
                conn.close()
            except OSError:
                pass

    def _admin_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._admin_sock.accept()
            except OSError:
                break
            threading.Thread(target=self._serve_admin, args=(conn,), daemon=True).start()

    def _serve_admin(self, conn: socket.socket) -> None:
        rfile = conn.makefile("r", encoding="utf-8")
        wfile = conn.makefile("w", encoding="utf-8")
        try:
            for line in rfile:
                line = line.strip()
                if not line:
                    continue
                wfile.write(json.dumps(self._admin_command(line)) + "\n")
                wfile.flush()
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _admin_command(self, line: str) -> dict:
        try:
            cmd = json.loads(line)
            name = cmd.get("cmd")
            if name == "approve":
                self.core.approve(int(cmd["id"]))
                return {"ok": True}
            if name == "reject":
                self.core.reject(int(cmd["id"]))
                return {"ok": True}
            if name == "list":
                return {"ok": True, "pending": self.core.queue.pending()}
            return {"ok": False, "error": "UnknownCommand", "message": f"unknown cmd {name!r}"}
        except UnknownRequestId as exc:
            return {"ok": False, "error": exc.code, "message": str(exc)}
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            return {"ok": False, "error": "MalformedCommand", "message": str(exc)}


def admin_request(admin: tuple[str, int], command: dict, timeout: float = 10.0) -> dict:
    """One admin round trip against a running datasite."""
    with socket.create_connection(admin, timeout=timeout) as conn:
        conn.sendall((json.dumps(command) + "\n").encode("utf-8"))
        rfile = conn.makefile("r", encoding="utf-8")
        line = rfile.readline()
    if not line:
        raise ConnectionError("admin socket closed without a reply")
    return json.loads(line)


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def _parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    if argv and argv[0] in ("approve", "reject", "list"):
        parser = argparse.ArgumentParser(prog="datasite", description="Datasite admin commands")
        parser.add_argument("command", choices=["approve", "reject", "list"])
        parser.add_argument("id", nargs="?", type=int, help="pending request id")
        parser.add_argument(
            "--admin", type=_parse_hostport, default=("127.0.0.1", 7701),
            help="admin socket address (default 127.0.0.1:7701)",
        )
        args = parser.parse_args(argv)
        if args.command in ("approve", "reject") and args.id is None:
            parser.error(f"{args.command} requires a request id")
        cmd = {"cmd": args.command}
        if args.id is not None:
            cmd["id"] = args.id
        reply = admin_request(args.admin, cmd)
        print(json.dumps(reply, indent=2))
        return 0 if reply.get("ok") else 1

    parser = argparse.ArgumentParser(
        prog="datasite", description="Serve one private CSV dataset for federated training"
    )
    parser.add_argument("--listen", type=_parse_hostport, required=True, help="host:port")
    parser.add_argument("--data", required=True, help="path to the local CSV file")
    parser.add_argument("--target", required=True, help="label column name")
    parser.add_argument(
        "--ignore", default="", help="comma-separated columns to drop before training"
    )
    parser.add_argument("--positive-label", default="1", help="label value treated as positive")
    parser.add_argument("--approval", choices=["auto", "manual"], default="auto")
    parser.add_argument(
        "--admin", type=_parse_hostport, default=None,
        help="admin socket (default: listen host, listen port + 1)",
    )
    parser.add_argument("--silo-id", default=None, help="silo name (default: derived from --data)")
    parser.add_argument("--log-file", default=None, help="structured log destination (default stderr)")
    args = parser.parse_args(argv)

    host, port = args.listen
    admin = args.admin or (host, port + 1 if port else 0)
    silo_id = args.silo_id or args.data.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    log_stream = open(args.log_file, "a", encoding="utf-8") if args.log_file else sys.stderr

    core = DatasiteCore.from_csv(
        args.data,
        silo_id=silo_id,
        approval=args.approval,
        declared_target=args.target,
        log_stream=log_stream,
    )
    server = DatasiteServer(core, (host, port), admin)

    import signal

    def _stop(signum, frame):
        server.shutdown()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)

    try:
        server.serve_forever()
    finally:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
