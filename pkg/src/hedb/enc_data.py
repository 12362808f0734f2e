"""Bit-sliced encrypted words, records and tables with a public schema.

Unsigned values are stored least-significant bit first.  Strings are stored
as their bytes in order, each byte LSB first, right-padded with 0x00 to the
column width.  Every bit is an independent ciphertext.
"""
from __future__ import annotations

import random
import re
import struct
from dataclasses import dataclass
from typing import Sequence, Union

from .errors import (
    InvalidCharacter,
    InvalidSchema,
    MalformedHeader,
    SchemaMismatch,
    TruncatedPayload,
    ValueOverflow,
)
from .he_core import (
    Ciphertext,
    PublicKey,
    SecretKey,
    decrypt_bit,
    encrypt_bit,
    read_ciphertext,
    serialize_ciphertext,
    _rng,
)

TABLE_MAGIC = b"HEDB-TBL v1"
KIND_CODES = {"uint": 1, "string": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

Value = Union[int, str]


def is_identifier(name: str) -> bool:
    return bool(_IDENT.match(name))


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    bit_width: int

    def __post_init__(self):
        if not is_identifier(self.name):
            raise InvalidSchema(f"bad column name {self.name!r}")
        if self.kind not in KIND_CODES:
            raise InvalidSchema(f"unknown column kind {self.kind!r}")
        if self.bit_width <= 0 or self.bit_width >= 1 << 16:
            raise InvalidSchema(f"column {self.name}: bit width must be in 1..65535")
        if self.kind == "string" and self.bit_width % 8:
            raise InvalidSchema(f"string column {self.name}: width must be a multiple of 8")

    @property
    def chars(self) -> int:
        return self.bit_width // 8

    def zero(self) -> Value:
        return "" if self.kind == "string" else 0


@dataclass(frozen=True)
class TableSchema:
    table_name: str
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        if not is_identifier(self.table_name):
            raise InvalidSchema(f"bad table name {self.table_name!r}")
        if not self.columns:
            raise InvalidSchema("a table needs at least one column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise InvalidSchema("duplicate column names")
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def record_bits(self) -> int:
        return sum(c.bit_width for c in self.columns)

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    def to_text(self) -> str:
        return "".join(f"{c.name}:{c.kind}:{c.bit_width}\n" for c in self.columns)

    @classmethod
    def from_text(cls, table_name: str, text: str) -> "TableSchema":
        """Parse the ``name:kind:bits`` per line schema file format."""
        cols = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(":")]
            if len(parts) != 3:
                raise InvalidSchema(f"line {lineno}: expected name:kind:bits")
            try:
                width = int(parts[2])
            except ValueError:
                raise InvalidSchema(f"line {lineno}: bit width must be an integer") from None
            cols.append(ColumnSpec(parts[0], parts[1], width))
        return cls(table_name, tuple(cols))


@dataclass(frozen=True)
class EncryptedWord:
    bits: tuple[Ciphertext, ...]

    @property
    def width(self) -> int:
        return len(self.bits)


@dataclass(frozen=True)
class EncryptedRecord:
    words: tuple[EncryptedWord, ...]

    def flat(self) -> list[Ciphertext]:
        return [b for w in self.words for b in w.bits]

    def conforms(self, schema: TableSchema) -> bool:
        return len(self.words) == len(schema.columns) and all(
            w.width == c.bit_width for w, c in zip(self.words, schema.columns)
        )


@dataclass(frozen=True)
class EncryptedTable:
    schema: TableSchema
    rows: tuple[EncryptedRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        for i, row in enumerate(self.rows):
            if not row.conforms(self.schema):
                raise SchemaMismatch(f"row {i} does not match schema {self.schema.table_name}")

    def with_row(self, row: EncryptedRecord) -> "EncryptedTable":
        return EncryptedTable(self.schema, self.rows + (row,))


# ------------------------------------------------------------------ encoding


def plain_bits(value: Value, spec: ColumnSpec) -> list[int]:
    """Plaintext bit pattern of ``value`` in storage order."""
    if spec.kind == "uint":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueOverflow(f"column {spec.name} expects an unsigned integer")
        if value < 0 or value >= 1 << spec.bit_width:
            raise ValueOverflow(f"{value} does not fit in {spec.bit_width} bits")
        return [(value >> i) & 1 for i in range(spec.bit_width)]
    if not isinstance(value, str):
        raise ValueOverflow(f"column {spec.name} expects a string")
    data = string_bytes(value, spec.chars)
    return [(byte >> b) & 1 for byte in data for b in range(8)]


def string_bytes(value: str, chars: int) -> bytes:
    if "\x00" in value:
        raise InvalidCharacter("NUL is reserved for padding")
    try:
        data = value.encode("latin-1")
    except UnicodeEncodeError:
        raise InvalidCharacter(f"{value!r} has characters outside latin-1") from None
    if len(data) > chars:
        raise ValueOverflow(f"{value!r} is longer than {chars} characters")
    return data.ljust(chars, b"\x00")


def value_from_bits(bits: Sequence[int], spec: ColumnSpec) -> Value:
    if spec.kind == "uint":
        return sum(b << i for i, b in enumerate(bits))
    data = bytes(
        sum(bits[8 * k + b] << b for b in range(8)) for k in range(spec.chars)
    )
    return data.rstrip(b"\x00").decode("latin-1")


def encode_word(
    value: Value,
    spec: ColumnSpec,
    key: SecretKey | PublicKey,
    seed: int | random.Random | None = None,
) -> EncryptedWord:
    rng = _rng(seed)
    return EncryptedWord(tuple(encrypt_bit(b, key, rng) for b in plain_bits(value, spec)))


def decode_word(w: EncryptedWord, spec: ColumnSpec, sk: SecretKey) -> Value:
    if w.width != spec.bit_width:
        raise SchemaMismatch(f"word has {w.width} bits, column {spec.name} has {spec.bit_width}")
    return value_from_bits([decrypt_bit(ct, sk) for ct in w.bits], spec)


def encode_record(
    values: Sequence[Value],
    schema: TableSchema,
    key: SecretKey | PublicKey,
    seed: int | random.Random | None = None,
) -> EncryptedRecord:
    if len(values) != len(schema.columns):
        raise SchemaMismatch(
            f"{schema.table_name} has {len(schema.columns)} columns, got {len(values)} values"
        )
    rng = _rng(seed)
    return EncryptedRecord(
        tuple(encode_word(v, c, key, rng) for v, c in zip(values, schema.columns))
    )


def decode_record(r: EncryptedRecord, schema: TableSchema, sk: SecretKey) -> tuple[Value, ...]:
    if not r.conforms(schema):
        raise SchemaMismatch("record does not match schema")
    return tuple(decode_word(w, c, sk) for w, c in zip(r.words, schema.columns))


def record_from_flat(bits: Sequence[Ciphertext], schema: TableSchema) -> EncryptedRecord:
    if len(bits) != schema.record_bits:
        raise SchemaMismatch(f"expected {schema.record_bits} bits, got {len(bits)}")
    words, pos = [], 0
    for c in schema.columns:
        words.append(EncryptedWord(tuple(bits[pos : pos + c.bit_width])))
        pos += c.bit_width
    return EncryptedRecord(tuple(words))


def encrypt_table(
    schema: TableSchema,
    rows: Sequence[Sequence[Value]],
    key: SecretKey | PublicKey,
    seed: int | random.Random | None = None,
) -> EncryptedTable:
    rng = _rng(seed)
    return EncryptedTable(schema, tuple(encode_record(r, schema, key, rng) for r in rows))


def decrypt_table(t: EncryptedTable, sk: SecretKey) -> list[tuple[Value, ...]]:
    return [decode_record(r, t.schema, sk) for r in t.rows]


# ------------------------------------------------------------- serialization


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


def _unpack_name(buf: memoryview, offset: int) -> tuple[str, int]:
    if offset + 2 > len(buf):
        raise TruncatedPayload("name length truncated")
    (n,) = struct.unpack_from(">H", buf, offset)
    offset += 2
    if offset + n > len(buf):
        raise TruncatedPayload("name truncated")
    try:
        return bytes(buf[offset : offset + n]).decode("utf-8"), offset + n
    except UnicodeDecodeError:
        raise MalformedHeader("name is not valid UTF-8") from None


def serialize_schema(schema: TableSchema) -> bytes:
    out = [_pack_name(schema.table_name), struct.pack(">H", len(schema.columns))]
    for c in schema.columns:
        out += [_pack_name(c.name), struct.pack(">BH", KIND_CODES[c.kind], c.bit_width)]
    return b"".join(out)


def read_schema(buf: bytes | memoryview, offset: int = 0) -> tuple[TableSchema, int]:
    buf = memoryview(buf)
    table_name, offset = _unpack_name(buf, offset)
    if offset + 2 > len(buf):
        raise TruncatedPayload("column count truncated")
    (ncols,) = struct.unpack_from(">H", buf, offset)
    offset += 2
    cols = []
    for _ in range(ncols):
        name, offset = _unpack_name(buf, offset)
        if offset + 3 > len(buf):
            raise TruncatedPayload("column spec truncated")
        kind, width = struct.unpack_from(">BH", buf, offset)
        offset += 3
        if kind not in KIND_NAMES:
            raise MalformedHeader(f"unknown column kind byte {kind:#x}")
        cols.append(ColumnSpec(name, KIND_NAMES[kind], width))
    try:
        return TableSchema(table_name, tuple(cols)), offset
    except InvalidSchema as exc:
        raise MalformedHeader(str(exc)) from exc


def serialize_table(t: EncryptedTable) -> bytes:
    out = [TABLE_MAGIC, serialize_schema(t.schema), struct.pack(">I", len(t.rows))]
    for row in t.rows:
        out += [serialize_ciphertext(ct) for ct in row.flat()]
    return b"".join(out)


def parse_table(data: bytes) -> EncryptedTable:
    buf = memoryview(data)
    if bytes(buf[: len(TABLE_MAGIC)]) != TABLE_MAGIC:
        raise MalformedHeader("not a HEDB table file (bad magic)")
    schema, offset = read_schema(buf, len(TABLE_MAGIC))
    if offset + 4 > len(buf):
        raise TruncatedPayload("row count truncated")
    (nrows,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    rows = []
    for _ in range(nrows):
        bits = []
        for _ in range(schema.record_bits):
            ct, offset = read_ciphertext(buf, offset)
            bits.append(ct)
        rows.append(record_from_flat(bits, schema))
    if offset != len(buf):
        raise SchemaMismatch(f"{len(buf) - offset} trailing bytes after the last row")
    return EncryptedTable(schema, tuple(rows))
