"""Wire layer: the versioned forest codec, envelope framing, and payloads.

Nothing here executes code on deserialize and no message can carry feature
rows or labels; the bit-exact layouts live in docs/protocol.md and are
frozen by golden-file tests.

Forest blob ("FRF1", all integers little-endian):
    magic[4] | version u16 | n_trees u32 | n_features u32 | n_classes u32
    | feature-name table | label-name table | trees...
Name tables are length-prefixed UTF-8 (u16 per entry).  Each tree is a node
count (u32) followed by packed node records: feature i32 (-1 = leaf),
threshold f64, left u32, right u32, class_counts u32[n_classes].  Leaves
carry canonical zeros in threshold/left/right.

Envelope framing: a big-endian u32 length prefix covering kind (u8) +
correlation_id (u64 BE) + payload.  Payloads are canonical JSON (UTF-8, no
whitespace, fields in schema order); forests travel base64-encoded.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .dataset import DataParams
from .errors import (
    BadMagic,
    ConnectionClosed,
    CorruptIndex,
    FrameTooLarge,
    MalformedHeader,
    MalformedPayload,
    TruncatedPayload,
    UnsupportedVersion,
)
from .forest import ForestParams, RandomForest
from .tree import DecisionTree

FOREST_MAGIC = b"FRF1"
FOREST_VERSION = 1
PROTOCOL_NAME = "fedrf"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024  # bytes, enforced before allocation
_HEADER = struct.Struct(">IBQ")  # length, kind, correlation_id


@dataclass(frozen=True)
class ModelParams:
    """Training schedule a coordinator pushes to every train silo."""

    n_base_estimators: int
    n_incremental_estimators: int = 0
    incremental_rounds: int = 0
    sample_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_base_estimators < 1:
            raise ValueError("n_base_estimators must be >= 1")
        if self.n_incremental_estimators < 0 or self.incremental_rounds < 0:
            raise ValueError("incremental schedule fields must be >= 0")
        if self.incremental_rounds > 0 and self.n_incremental_estimators < 1:
            raise ValueError("incremental rounds require n_incremental_estimators >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


# --------------------------------------------------------------------------
# forest codec
# --------------------------------------------------------------------------

def _node_dtype(n_classes: int) -> np.dtype:
    return np.dtype(
        [
            ("feat", "<i4"),
            ("thr", "<f8"),
            ("left", "<u4"),
            ("right", "<u4"),
            ("counts", "<u4", (n_classes,)),
        ]
    )


def _encode_name_table(names) -> bytes:
    out = bytearray()
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"name too long for wire format: {name[:32]!r}...")
        out += struct.pack("<H", len(raw))
        out += raw
    return bytes(out)


def encode_forest(forest: RandomForest) -> bytes:
    """Canonical bytes for a forest: identical forests yield identical blobs.

    Training params are local metadata and are not serialized; the blob is
    the model itself (schema tables + trees).
    """
    n_classes = forest.n_classes
    parts = [
        FOREST_MAGIC,
        struct.pack("<H", FOREST_VERSION),
        struct.pack("<III", forest.n_trees, forest.n_features, n_classes),
        _encode_name_table(forest.feature_names),
        _encode_name_table(forest.label_names),
    ]
    dtype = _node_dtype(n_classes)
    for tree in forest.trees:
        if tree.class_counts.max(initial=0) > 0xFFFFFFFF:
            raise ValueError("class count exceeds u32 wire range")
        rec = np.empty(tree.n_nodes, dtype=dtype)
        rec["feat"] = tree.feature
        rec["thr"] = tree.threshold
        rec["left"] = tree.left
        rec["right"] = tree.right
        rec["counts"] = tree.class_counts
        parts.append(struct.pack("<I", tree.n_nodes))
        parts.append(rec.tobytes())
    return b"".join(parts)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"blob ends inside {what} (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _decode_name_table(r: _Reader, count: int, what: str) -> tuple[str, ...]:
    names = []
    for i in range(count):
        ln = r.u16(f"{what} length {i}")
        raw = r.take(ln, f"{what} {i}")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError:
            raise CorruptIndex(f"{what} {i} is not valid UTF-8") from None
    return tuple(names)


def decode_forest(blob: bytes) -> RandomForest:
    """Parse and fully validate a forest blob (indices, tables, coverage)."""
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != FOREST_MAGIC:
        raise BadMagic(f"expected {FOREST_MAGIC!r}, got {magic!r}")
    version = r.u16("version")
    if version > FOREST_VERSION:
        raise UnsupportedVersion(f"forest format version {version} > supported {FOREST_VERSION}")
    if version < 1:
        raise UnsupportedVersion(f"forest format version {version} is not valid")
    n_trees = r.u32("tree count")
    n_features = r.u32("feature count")
    n_classes = r.u32("class count")
    if n_trees < 1:
        raise CorruptIndex("forest has zero trees")
    if n_classes < 1:
        raise CorruptIndex("forest has zero classes")
    feature_names = _decode_name_table(r, n_features, "feature name")
    label_names = _decode_name_table(r, n_classes, "label name")

    dtype = _node_dtype(n_classes)
    trees = []
    for t in range(n_trees):
        n_nodes = r.u32(f"tree {t} node count")
        if n_nodes < 1:
            raise CorruptIndex(f"tree {t} has zero nodes")
        raw = r.take(n_nodes * dtype.itemsize, f"tree {t} nodes")
        rec = np.frombuffer(raw, dtype=dtype)
        tree = DecisionTree(
            feature=rec["feat"].copy(),
            threshold=rec["thr"].copy(),
            left=rec["left"].astype(np.int32),
            right=rec["right"].astype(np.int32),
            class_counts=rec["counts"].astype(np.int64),
            n_features=n_features,
        )
        err = tree.structure_error()
        if err is not None:
            raise CorruptIndex(f"tree {t}: {err}")
        trees.append(tree)

    if r.pos != len(blob):
        raise TruncatedPayload(f"{len(blob) - r.pos} trailing bytes after forest")
    params = ForestParams(n_estimators=n_trees)
    return RandomForest(tuple(trees), params, label_names, feature_names)


def forest_to_b64(forest: RandomForest) -> str:
    return base64.b64encode(encode_forest(forest)).decode("ascii")


def forest_from_b64(text: str) -> RandomForest:
    try:
        blob = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise MalformedPayload(f"forest field is not valid base64: {exc}") from None
    return decode_forest(blob)


# --------------------------------------------------------------------------
# envelope framing
# --------------------------------------------------------------------------

class MessageKind(IntEnum):
    HELLO = 1
    SET_DATA_PARAMS = 2
    SET_MODEL_PARAMS = 3
    TRAIN_REQUEST = 4
    TRAIN_RESPONSE = 5
    EVAL_REQUEST = 6
    EVAL_RESPONSE = 7
    APPROVAL_PENDING = 8
    ERROR = 9


@dataclass(frozen=True)
class Envelope:
    kind: MessageKind
    correlation_id: int
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.correlation_id < 2**64:
            raise ValueError("correlation_id must fit in 64 unsigned bits")


def frame_write(stream, envelope: Envelope) -> None:
    """Write one length-prefixed envelope."""
    if len(envelope.payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(envelope.payload)} bytes exceeds {MAX_PAYLOAD}")
    header = _HEADER.pack(9 + len(envelope.payload), int(envelope.kind), envelope.correlation_id)
    stream.write(header + envelope.payload)
    flush = getattr(stream, "flush", None)
    if flush is not None:
        flush()


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise ConnectionClosed(
                "stream closed mid-frame" if got or chunks else "stream closed",
                clean=not got,
            )
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def frame_read(stream) -> Envelope:
    """Read exactly one envelope; never consumes bytes beyond it."""
    try:
        prefix = _read_exact(stream, 4)
    except ConnectionClosed as exc:
        raise ConnectionClosed("connection closed at frame boundary", clean=exc.clean) from None
    (length,) = struct.unpack(">I", prefix)
    if length < 9:
        raise MalformedHeader(f"declared length {length} cannot hold an envelope header")
    if length - 9 > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload of {length - 9} bytes exceeds {MAX_PAYLOAD}")
    body = _read_exact(stream, length)
    kind_byte = body[0]
    try:
        kind = MessageKind(kind_byte)
    except ValueError:
        raise MalformedHeader(f"unknown message kind byte {kind_byte}") from None
    (correlation_id,) = struct.unpack(">Q", body[1:9])
    return Envelope(kind, correlation_id, body[9:])


# --------------------------------------------------------------------------
# payload schemas
# --------------------------------------------------------------------------
# Field type vocabulary.  The schema registry is deliberately exhaustive so a
# single test can prove no message kind admits a row-carrying payload: the
# only aggregate types are name lists, one 2x2 count matrix, and base64
# model blobs.
INT = "int"
FLOAT = "float"
STR = "str"
OPT_STR = "opt_str"
BOOL = "bool"
STR_LIST = "str_list"
B64_FOREST = "b64_forest"
OPT_B64_FOREST = "opt_b64_forest"
CONFUSION_2X2 = "confusion_2x2"

REQUEST_SCHEMAS: dict[MessageKind, tuple[tuple[str, str], ...]] = {
    MessageKind.HELLO: (
        ("protocol", STR),
        ("version", INT),
        ("role", STR),
        ("silo_id", OPT_STR),
    ),
    MessageKind.SET_DATA_PARAMS: (
        ("target_column", STR),
        ("ignored_columns", STR_LIST),
        ("positive_label", STR),
        ("label_names", STR_LIST),
    ),
    MessageKind.SET_MODEL_PARAMS: (
        ("n_base_estimators", INT),
        ("n_incremental_estimators", INT),
        ("incremental_rounds", INT),
        ("sample_fraction", FLOAT),
        ("seed", INT),
    ),
    MessageKind.TRAIN_REQUEST: (
        ("round_index", INT),
        ("seed", INT),
        ("base_forest", OPT_B64_FOREST),
    ),
    MessageKind.TRAIN_RESPONSE: (
        ("n_samples", INT),
        ("n_trees", INT),
        ("forest", B64_FOREST),
    ),
    MessageKind.EVAL_REQUEST: (("forest", B64_FOREST),),
    MessageKind.EVAL_RESPONSE: (
        ("accuracy", FLOAT),
        ("precision", FLOAT),
        ("recall", FLOAT),
        ("f1", FLOAT),
        ("confusion", CONFUSION_2X2),
        ("n_samples", INT),
    ),
    MessageKind.APPROVAL_PENDING: (("request_id", INT),),
    MessageKind.ERROR: (("code", STR), ("message", STR)),
}

# SET_DATA_PARAMS / SET_MODEL_PARAMS are acknowledged by echoing the kind
# with this payload.
ACK_SCHEMA: tuple[tuple[str, str], ...] = (("ok", BOOL),)
ACK_KINDS = (MessageKind.SET_DATA_PARAMS, MessageKind.SET_MODEL_PARAMS)


def _check_field(name: str, ftype: str, value):
    ok = True
    if ftype == INT:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif ftype == FLOAT:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif ftype == STR:
        ok = isinstance(value, str)
    elif ftype == OPT_STR:
        ok = value is None or isinstance(value, str)
    elif ftype == BOOL:
        ok = isinstance(value, bool)
    elif ftype == STR_LIST:
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    elif ftype == B64_FOREST:
        ok = isinstance(value, str)
    elif ftype == OPT_B64_FOREST:
        ok = value is None or isinstance(value, str)
    elif ftype == CONFUSION_2X2:
        ok = (
            isinstance(value, list)
            and len(value) == 2
            and all(
                isinstance(row, list)
                and len(row) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) for v in row)
                for row in value
            )
        )
    else:  # pragma: no cover - schema registry bug
        raise AssertionError(f"unknown field type {ftype}")
    if not ok:
        raise MalformedPayload(f"field {name!r} has wrong type (expected {ftype})")


def _schema_for(kind: MessageKind, values: dict) -> tuple[tuple[str, str], ...]:
    if kind in ACK_KINDS and set(values) == {"ok"}:
        return ACK_SCHEMA
    return REQUEST_SCHEMAS[kind]


def encode_payload(kind: MessageKind, values: dict) -> bytes:
    """Canonical JSON bytes with fields emitted in schema order."""
    schema = _schema_for(kind, values)
    names = [n for n, _ in schema]
    if set(values) != set(names):
        raise MalformedPayload(
            f"{kind.name} payload fields {sorted(values)} != schema fields {sorted(names)}"
        )
    ordered = {}
    for name, ftype in schema:
        _check_field(name, ftype, values[name])
        ordered[name] = values[name]
    return json.dumps(ordered, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode(
        "utf-8"
    )


def decode_payload(kind: MessageKind, payload: bytes) -> dict:
    """Parse and validate a payload against the kind's schema."""
    try:
        values = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"{kind.name} payload is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise MalformedPayload(f"{kind.name} payload must be a JSON object")
    schema = _schema_for(kind, values)
    names = [n for n, _ in schema]
    if set(values) != set(names):
        raise MalformedPayload(
            f"{kind.name} payload fields {sorted(values)} != schema fields {sorted(names)}"
        )
    for name, ftype in schema:
        _check_field(name, ftype, values[name])
        if ftype == FLOAT:
            values[name] = float(values[name])
    return values


def make_envelope(kind: MessageKind, correlation_id: int, values: dict) -> Envelope:
    return Envelope(kind, correlation_id, encode_payload(kind, values))


def error_envelope(correlation_id: int, code: str, message: str) -> Envelope:
    return make_envelope(
        MessageKind.ERROR, correlation_id, {"code": code, "message": message}
    )


def model_params_to_payload(p: ModelParams) -> dict:
    return {
        "n_base_estimators": p.n_base_estimators,
        "n_incremental_estimators": p.n_incremental_estimators,
        "incremental_rounds": p.incremental_rounds,
        "sample_fraction": p.sample_fraction,
        "seed": p.seed,
    }


def model_params_from_payload(values: dict) -> ModelParams:
    try:
        return ModelParams(
            n_base_estimators=values["n_base_estimators"],
            n_incremental_estimators=values["n_incremental_estimators"],
            incremental_rounds=values["incremental_rounds"],
            sample_fraction=values["sample_fraction"],
            seed=values["seed"],
        )
    except ValueError as exc:
        raise MalformedPayload(str(exc)) from None


def data_params_to_payload(p: DataParams) -> dict:
    return {
        "target_column": p.target_column,
        "ignored_columns": list(p.ignored_columns),
        "positive_label": p.positive_label,
        "label_names": list(p.label_names),
    }


def data_params_from_payload(values: dict) -> DataParams:
    try:
        return DataParams(
            target_column=values["target_column"],
            ignored_columns=tuple(values["ignored_columns"]),
            positive_label=values["positive_label"],
            label_names=tuple(values["label_names"]),
        )
    except ValueError as exc:
        raise MalformedPayload(str(exc)) from None
