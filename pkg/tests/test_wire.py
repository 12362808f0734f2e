import io
import struct

import pytest
from hypothesis import given, strategies as st

from hedb.enc_data import TableSchema, decode_record, encode_record
from hedb.errors import (
    MalformedFrame,
    NoiseOverflow,
    PayloadTooLarge,
    ShapeMismatch,
    TruncatedPayload,
)
from hedb.he_core import Ciphertext, SecurityParams, keygen
from hedb.sql_front import compile_query, parse, validate
from hedb.wire import (
    ERROR_CODES,
    HEADER,
    MsgType,
    decode_create_table,
    decode_error,
    decode_insert,
    decode_query,
    decode_result,
    encode_create_table,
    encode_error,
    encode_frame,
    encode_insert,
    encode_query,
    encode_result,
    parse_bootstrap,
    read_frame,
    read_public,
    serialize_bootstrap,
    serialize_public,
)

SCHEMA = TableSchema.from_text("patients", "name:string:24\nage:uint:8\nward:uint:4\n")


@pytest.fixture(scope="module")
def keys():
    return keygen(SecurityParams.bootstrappable(2), seed=31)


def test_frame_layout():
    frame = encode_frame(MsgType.PING, b"hi")
    assert frame[:4] == b"HEDB" and frame[4] == 1 and frame[5] == 7
    assert struct.unpack(">I", frame[6:10]) == (2,)
    assert read_frame(io.BytesIO(frame)) == (MsgType.PING, b"hi")


@given(st.sampled_from(list(MsgType)), st.binary(max_size=300))
def test_frame_round_trip(mtype, payload):
    stream = io.BytesIO(encode_frame(mtype, payload) * 2)
    assert read_frame(stream) == (mtype, payload)
    assert read_frame(stream) == (mtype, payload)
    assert read_frame(stream) is None


@pytest.mark.parametrize(
    "raw",
    [
        HEADER.pack(b"NOPE", 1, 7, 0),
        HEADER.pack(b"HEDB", 2, 7, 0),
        HEADER.pack(b"HEDB", 1, 99, 0),
        HEADER.pack(b"HEDB", 1, 7, 10) + b"short",
        b"HED",
    ],
)
def test_malformed_frames(raw):
    with pytest.raises(MalformedFrame):
        read_frame(io.BytesIO(raw))


def test_payload_limit():
    with pytest.raises(PayloadTooLarge):
        read_frame(io.BytesIO(encode_frame(MsgType.QUERY, b"x" * 100)), max_payload=99)


def test_public_context_round_trip(keys):
    _, pk, _ = keys
    data = serialize_public(pk)
    pk2, off = read_public(data)
    assert off == len(data)
    assert pk2.params == pk.params and pk2.x0 == pk.x0 and pk2.y == pk.y
    assert pk2.zero_encs == ()


def test_public_context_rejects_bad_params(keys):
    _, pk, _ = keys
    data = bytearray(serialize_public(pk))
    data[4:8] = struct.pack(">I", 1)  # p_bits below n_bits
    with pytest.raises(ShapeMismatch):
        read_public(bytes(data))
    with pytest.raises(TruncatedPayload):
        read_public(serialize_public(pk)[:-1])


def test_bootstrap_file_round_trip(keys):
    _, pk, bk = keys
    data = serialize_bootstrap(pk, bk)
    pk2, bk2 = parse_bootstrap(data)
    assert bk2 == bk and pk2.x0 == pk.x0
    with pytest.raises(MalformedFrame):
        parse_bootstrap(b"junk" + data)
    with pytest.raises(TruncatedPayload):
        parse_bootstrap(data + b"\x00")


def test_create_and_insert_round_trip(keys):
    sk, pk, _ = keys
    schema, pk2 = decode_create_table(encode_create_table(SCHEMA, pk))
    assert schema == SCHEMA and pk2.x0 == pk.x0
    rec = encode_record(("Al", 9, 3), SCHEMA, sk, 1)
    table, cts = decode_insert(encode_insert("patients", rec))
    assert table == "patients" and cts == rec.flat()
    with pytest.raises(MalformedFrame):
        decode_insert(encode_insert("patients", rec) + b"\x00")


@pytest.mark.parametrize(
    "text",
    [
        "SELECT * FROM patients WHERE name = 'Al'",
        "SELECT COUNT(*) FROM patients WHERE age < 9",
        "SELECT AVG(ward) FROM patients WHERE name = 'A?*'",
        "DELETE FROM patients WHERE ward > 1",
        "UPDATE patients SET name = 'B', age = 1, ward = 2 WHERE age = 9",
    ],
)
def test_query_round_trip(text, keys):
    sk, _, _ = keys
    q = compile_query(validate(parse(text), SCHEMA), sk, None, 5)
    q2 = decode_query(encode_query(q), lambda name: SCHEMA)
    assert q2 == q
    if q.params.update is not None:
        assert decode_record(q2.params.update, SCHEMA, sk) == ("B", 1, 2)


def test_query_shape_checks(keys):
    sk, _, _ = keys
    q = compile_query(validate(parse("SELECT * FROM patients WHERE age = 3"), SCHEMA), sk, None, 5)
    payload = encode_query(q)
    narrower = TableSchema.from_text("patients", "name:string:24\nage:uint:4\nward:uint:4\n")
    with pytest.raises(ShapeMismatch):
        decode_query(payload, lambda name: narrower)
    with pytest.raises(MalformedFrame):
        decode_query(payload + b"\x00", lambda name: SCHEMA)
    with pytest.raises(TruncatedPayload):
        decode_query(payload[:-1], lambda name: SCHEMA)


def test_result_and_error_round_trip():
    cts = [Ciphertext(5, 1), Ciphertext(2**300, 9)]
    assert decode_result(encode_result(cts)) == cts
    assert decode_result(encode_result([])) == []
    err = decode_error(encode_error(NoiseOverflow("too deep")))
    assert err.code == "NoiseOverflow" and "too deep" in str(err)
    assert decode_error(encode_error("UnknownMessage", "PING")).code == "UnknownMessage"
    assert decode_error(b"\x00").code == "MalformedFrame"
    assert decode_error(struct.pack(">H", len(ERROR_CODES) + 5)).code == "Error"
