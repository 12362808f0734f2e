import random

import pytest
from hypothesis import given, strategies as st

from hedb.enc_data import (
    ColumnSpec,
    EncryptedTable,
    TableSchema,
    decode_record,
    decode_word,
    decrypt_table,
    encode_record,
    encode_word,
    encrypt_table,
    parse_table,
    plain_bits,
    read_schema,
    record_from_flat,
    serialize_schema,
    serialize_table,
    value_from_bits,
)
from hedb.errors import (
    InvalidCharacter,
    InvalidSchema,
    MalformedHeader,
    SchemaMismatch,
    TruncatedPayload,
    ValueOverflow,
)
from hedb.he_core import SecurityParams, keygen

SCHEMA = TableSchema.from_text("people", "name:string:32\nage:uint:8\nward:uint:4\n")


@pytest.fixture(scope="module")
def keys():
    return keygen(SecurityParams.database(2), seed=21)


def test_schema_text_round_trip():
    assert TableSchema.from_text("people", SCHEMA.to_text()) == SCHEMA
    assert SCHEMA.record_bits == 44
    assert SCHEMA.index("ward") == 2 and SCHEMA.column("age").kind == "uint"


def test_schema_text_ignores_comments_and_blank_lines():
    s = TableSchema.from_text("t", "# header\n\n a : uint : 4  # trailing\n")
    assert s.columns == (ColumnSpec("a", "uint", 4),)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "a:uint\n",
        "a:uint:x\n",
        "a:float:8\n",
        "a:uint:0\n",
        "a:string:12\n",
        "a:uint:4\na:uint:4\n",
        "1a:uint:4\n",
    ],
)
def test_schema_rejects_bad_text(text):
    with pytest.raises(InvalidSchema):
        TableSchema.from_text("t", text)


def test_schema_rejects_bad_table_name():
    with pytest.raises(InvalidSchema):
        TableSchema("bad name", (ColumnSpec("a", "uint", 4),))


def test_uint_bits_lsb_first():
    spec = ColumnSpec("a", "uint", 4)
    assert plain_bits(6, spec) == [0, 1, 1, 0]
    assert value_from_bits([0, 1, 1, 0], spec) == 6


def test_string_bits_padded_with_nul():
    spec = ColumnSpec("s", "string", 24)
    bits = plain_bits("Ab", spec)
    assert len(bits) == 24 and bits[16:] == [0] * 8
    assert value_from_bits(bits, spec) == "Ab"


@pytest.mark.parametrize(
    "value,spec,exc",
    [
        (16, ColumnSpec("a", "uint", 4), ValueOverflow),
        (-1, ColumnSpec("a", "uint", 4), ValueOverflow),
        (True, ColumnSpec("a", "uint", 4), ValueOverflow),
        ("3", ColumnSpec("a", "uint", 4), ValueOverflow),
        ("abcde", ColumnSpec("s", "string", 32), ValueOverflow),
        (3, ColumnSpec("s", "string", 32), ValueOverflow),
        ("a\x00b", ColumnSpec("s", "string", 32), InvalidCharacter),
        ("€", ColumnSpec("s", "string", 32), InvalidCharacter),
    ],
)
def test_encoding_rejects(value, spec, exc):
    with pytest.raises(exc):
        plain_bits(value, spec)


@given(st.integers(0, 255))
def test_word_round_trip_uint(v):
    sk, pk, _ = keygen(SecurityParams.from_lambda(2), seed=3)
    spec = ColumnSpec("a", "uint", 8)
    assert decode_word(encode_word(v, spec, sk, v), spec, sk) == v


@given(st.text(alphabet=st.characters(min_codepoint=1, max_codepoint=255), max_size=4))
def test_word_round_trip_string(s):
    sk, pk, _ = keygen(SecurityParams.from_lambda(2), seed=3)
    spec = ColumnSpec("s", "string", 32)
    assert decode_word(encode_word(s, spec, sk, 1), spec, sk) == s


def test_record_round_trip_public_key(keys):
    sk, pk, _ = keys
    row = ("Zed", 41, 9)
    rec = encode_record(row, SCHEMA, pk, seed=1)
    assert rec.conforms(SCHEMA)
    assert decode_record(rec, SCHEMA, sk) == row


def test_record_arity_checked(keys):
    sk, _, _ = keys
    with pytest.raises(SchemaMismatch):
        encode_record(("a", 1), SCHEMA, sk)


def test_record_from_flat(keys):
    sk, _, _ = keys
    rec = encode_record(("x", 1, 2), SCHEMA, sk, seed=2)
    assert record_from_flat(rec.flat(), SCHEMA) == rec
    with pytest.raises(SchemaMismatch):
        record_from_flat(rec.flat()[:-1], SCHEMA)


def test_table_rejects_nonconforming_row(keys):
    sk, _, _ = keys
    other = TableSchema.from_text("o", "a:uint:4\n")
    rec = encode_record((1,), other, sk)
    with pytest.raises(SchemaMismatch):
        EncryptedTable(SCHEMA, (rec,))


def test_schema_binary_round_trip():
    data = serialize_schema(SCHEMA)
    assert read_schema(data) == (SCHEMA, len(data))
    with pytest.raises(TruncatedPayload):
        read_schema(data[:-1])


def test_schema_binary_rejects_unknown_kind():
    data = bytearray(serialize_schema(TableSchema.from_text("t", "a:uint:4\n")))
    data[-3] = 9
    with pytest.raises(MalformedHeader):
        read_schema(bytes(data))


def test_table_file_round_trip(keys):
    sk, _, _ = keys
    rows = [("Ann", 30, 1), ("", 0, 0), ("Bo", 255, 15)]
    t = encrypt_table(SCHEMA, rows, sk, seed=random.Random(4))
    data = serialize_table(t)
    t2 = parse_table(data)
    assert t2 == t
    assert decrypt_table(t2, sk) == rows


def test_table_file_errors(keys):
    sk, _, _ = keys
    data = serialize_table(encrypt_table(SCHEMA, [("a", 1, 1)], sk, seed=0))
    with pytest.raises(MalformedHeader):
        parse_table(b"XXXX" + data[4:])
    with pytest.raises(TruncatedPayload):
        parse_table(data[:-3])
    with pytest.raises(SchemaMismatch):
        parse_table(data + b"\x00")


def test_empty_table_round_trip():
    t = EncryptedTable(SCHEMA)
    assert parse_table(serialize_table(t)) == t
