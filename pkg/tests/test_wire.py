import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrf.errors import (
    BadMagic,
    ConnectionClosed,
    CorruptIndex,
    DecodeError,
    FrameTooLarge,
    MalformedHeader,
    MalformedPayload,
    TruncatedPayload,
    UnsupportedVersion,
)
from fedrf.forest import ForestParams, fit_forest, predict_batch
from fedrf.wire import (
    ACK_KINDS,
    ACK_SCHEMA,
    B64_FOREST,
    BOOL,
    CONFUSION_2X2,
    Envelope,
    FLOAT,
    INT,
    MAX_PAYLOAD,
    MessageKind,
    OPT_B64_FOREST,
    OPT_STR,
    REQUEST_SCHEMAS,
    STR,
    STR_LIST,
    decode_forest,
    decode_payload,
    encode_forest,
    encode_payload,
    forest_from_b64,
    forest_to_b64,
    frame_read,
    frame_write,
    make_envelope,
)

from conftest import forest_of_leaves, make_dataset, random_fitted_forest


# --- forest codec ---------------------------------------------------------------

def golden_leaf_blob() -> bytes:
    """The single-leaf forest blob assembled independently of the codec."""
    blob = b"FRF1"
    blob += struct.pack("<H", 1)
    blob += struct.pack("<III", 1, 2, 2)  # trees, features, classes
    for name in (b"f0", b"f1", b"0", b"1"):
        blob += struct.pack("<H", len(name)) + name
    blob += struct.pack("<I", 1)  # node count
    blob += struct.pack("<i", -1) + struct.pack("<d", 0.0)
    blob += struct.pack("<II", 0, 0)  # left, right
    blob += struct.pack("<II", 0, 1)  # class counts
    return blob


def test_golden_single_leaf_forest_bytes():
    forest = forest_of_leaves([1])
    assert encode_forest(forest) == golden_leaf_blob()


def test_golden_blob_decodes_to_identical_structure():
    forest = decode_forest(golden_leaf_blob())
    assert forest.structurally_equal(forest_of_leaves([1]))


def test_roundtrip_is_idempotent(small_data, small_params):
    forest = fit_forest(small_data, small_params)
    blob = encode_forest(forest)
    again = encode_forest(decode_forest(blob))
    assert blob == again


def test_roundtrip_preserves_structure_and_predictions():
    data = make_dataset(n=120, f=5, seed=21)
    forest = fit_forest(data, ForestParams(n_estimators=200, seed=3))
    decoded = decode_forest(encode_forest(forest))
    assert decoded.structurally_equal(forest)
    rows = np.random.default_rng(0).normal(size=(100, 5))
    assert np.array_equal(predict_batch(forest, rows), predict_batch(decoded, rows))


def test_truncation_by_one_byte():
    blob = golden_leaf_blob()
    with pytest.raises(TruncatedPayload):
        decode_forest(blob[:-1])


def test_bad_magic():
    blob = b"XXXX" + golden_leaf_blob()[4:]
    with pytest.raises(BadMagic):
        decode_forest(blob)


def test_unsupported_version():
    blob = bytearray(golden_leaf_blob())
    blob[4:6] = struct.pack("<H", 2)
    with pytest.raises(UnsupportedVersion):
        decode_forest(bytes(blob))


def test_corrupt_child_index():
    forest = random_fitted_forest(seed=5, n_trees=1, n=30)
    blob = bytearray(encode_forest(forest))
    # find the first internal node record and point its left child out of range
    header = 4 + 2 + 12
    for name in forest.feature_names + forest.label_names:
        header += 2 + len(name.encode())
    node0 = header + 4
    assert struct.unpack_from("<i", blob, node0)[0] >= 0  # root is internal
    struct.pack_into("<I", blob, node0 + 12, 10_000)
    with pytest.raises(CorruptIndex):
        decode_forest(bytes(blob))


def test_trailing_garbage_rejected():
    with pytest.raises(TruncatedPayload):
        decode_forest(golden_leaf_blob() + b"\x00")


def test_zero_trees_rejected():
    blob = bytearray(golden_leaf_blob())
    struct.pack_into("<I", blob, 6, 0)
    with pytest.raises(DecodeError):
        decode_forest(bytes(blob))


def test_leaf_with_zero_counts_rejected():
    blob = bytearray(golden_leaf_blob())
    struct.pack_into("<II", blob, len(blob) - 8, 0, 0)
    with pytest.raises(CorruptIndex):
        decode_forest(bytes(blob))


def test_mutation_fuzz_never_crashes():
    base = encode_forest(random_fitted_forest(seed=8, n_trees=2, n=25))
    rng = np.random.default_rng(13)
    for _ in range(2000):
        blob = bytearray(base)
        for _ in range(int(rng.integers(1, 4))):
            blob[int(rng.integers(len(blob)))] = int(rng.integers(256))
        try:
            decoded = decode_forest(bytes(blob))
        except DecodeError:
            continue
        assert all(t.structure_error() is None for t in decoded.trees)


def test_b64_transport():
    forest = forest_of_leaves([0, 1])
    assert forest_from_b64(forest_to_b64(forest)).structurally_equal(forest)
    with pytest.raises(MalformedPayload):
        forest_from_b64("not ░ base64")


# --- framing ---------------------------------------------------------------------

def roundtrip(env: Envelope) -> Envelope:
    buf = io.BytesIO()
    frame_write(buf, env)
    buf.seek(0)
    return frame_read(buf)


def test_frame_roundtrip():
    env = Envelope(MessageKind.ERROR, 7, b'{"code":"X","message":"y"}')
    got = roundtrip(env)
    assert got == env


def test_frame_roundtrip_empty_payload():
    env = Envelope(MessageKind.HELLO, 2**64 - 1, b"")
    assert roundtrip(env) == env


def test_two_envelopes_back_to_back():
    buf = io.BytesIO()
    first = make_envelope(MessageKind.APPROVAL_PENDING, 1, {"request_id": 9})
    second = make_envelope(MessageKind.ERROR, 2, {"code": "A", "message": "b"})
    frame_write(buf, first)
    frame_write(buf, second)
    buf.seek(0)
    assert frame_read(buf) == first
    assert frame_read(buf) == second
    with pytest.raises(ConnectionClosed) as err:
        frame_read(buf)
    assert err.value.clean


def test_frame_too_large_before_allocation():
    buf = io.BytesIO(struct.pack(">I", 2**32 - 1) + b"\x00" * 16)
    with pytest.raises(FrameTooLarge):
        frame_read(buf)


def test_write_rejects_oversized_payload():
    class Huge(bytes):
        def __len__(self):
            return MAX_PAYLOAD + 1

    with pytest.raises(FrameTooLarge):
        frame_write(io.BytesIO(), Envelope(MessageKind.HELLO, 0, Huge()))


def test_malformed_header_too_short_length():
    buf = io.BytesIO(struct.pack(">I", 5) + b"\x00" * 5)
    with pytest.raises(MalformedHeader):
        frame_read(buf)


def test_unknown_kind_byte():
    buf = io.BytesIO()
    frame_write(buf, Envelope(MessageKind.HELLO, 1, b""))
    raw = bytearray(buf.getvalue())
    raw[4] = 200
    with pytest.raises(MalformedHeader):
        frame_read(io.BytesIO(bytes(raw)))


def test_connection_closed_mid_frame_is_not_clean():
    buf = io.BytesIO()
    frame_write(buf, Envelope(MessageKind.HELLO, 1, b"abc"))
    truncated = io.BytesIO(buf.getvalue()[:-2])
    with pytest.raises(ConnectionClosed) as err:
        frame_read(truncated)
    assert not err.value.clean


@given(st.binary(max_size=200), st.integers(min_value=0, max_value=2**64 - 1))
@settings(max_examples=100)
def test_frame_roundtrip_any_payload(payload, correlation):
    env = Envelope(MessageKind.TRAIN_RESPONSE, correlation, payload)
    assert roundtrip(env) == env


# --- payload schemas ----------------------------------------------------------------

def test_canonical_payload_bytes_fixed_order():
    payload = encode_payload(
        MessageKind.TRAIN_REQUEST, {"seed": 5, "base_forest": None, "round_index": 2}
    )
    assert payload == b'{"round_index":2,"seed":5,"base_forest":null}'


def test_unknown_fields_rejected():
    with pytest.raises(MalformedPayload):
        decode_payload(MessageKind.APPROVAL_PENDING, b'{"request_id":1,"rows":[1,2]}')
    with pytest.raises(MalformedPayload):
        encode_payload(MessageKind.APPROVAL_PENDING, {"request_id": 1, "rows": [1]})


def test_wrong_types_rejected():
    with pytest.raises(MalformedPayload):
        decode_payload(MessageKind.APPROVAL_PENDING, b'{"request_id":"one"}')
    with pytest.raises(MalformedPayload):
        decode_payload(MessageKind.ERROR, b'{"code":1,"message":"x"}')
    with pytest.raises(MalformedPayload):
        decode_payload(MessageKind.HELLO, b"[1,2]")
    with pytest.raises(MalformedPayload):
        decode_payload(MessageKind.HELLO, b"\xff\xfe")


def test_ack_form_for_setter_kinds():
    for kind in ACK_KINDS:
        payload = encode_payload(kind, {"ok": True})
        assert decode_payload(kind, payload) == {"ok": True}
    with pytest.raises(MalformedPayload):
        encode_payload(MessageKind.TRAIN_REQUEST, {"ok": True})


def test_every_kind_has_a_schema_and_no_row_capacity():
    assert set(REQUEST_SCHEMAS) == set(MessageKind)
    allowed = {INT, FLOAT, STR, OPT_STR, BOOL, STR_LIST, B64_FOREST, OPT_B64_FOREST,
               CONFUSION_2X2}
    schemas = list(REQUEST_SCHEMAS.items()) + [("ack", ACK_SCHEMA)]
    for kind, schema in schemas:
        for name, ftype in schema:
            assert ftype in allowed, f"{kind}: unknown type {ftype}"
            # the only aggregate payload types are column/label NAME tables,
            # the 2x2 confusion matrix, and serialized models
            if ftype == STR_LIST:
                assert name in ("ignored_columns", "label_names")
            assert "row" not in name and "feature_matrix" not in name


def test_eval_response_schema_roundtrip():
    values = {
        "accuracy": 0.875,
        "precision": 0.8,
        "recall": 0.75,
        "f1": 0.7742,
        "confusion": [[10, 2], [1, 7]],
        "n_samples": 20,
    }
    payload = encode_payload(MessageKind.EVAL_RESPONSE, values)
    assert decode_payload(MessageKind.EVAL_RESPONSE, payload) == values
