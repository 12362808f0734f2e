"""Framed binary protocol shared by the server and the client.

Frame: ``b"HEDB"`` + version byte + message-type byte + u32 payload length
+ payload, all big-endian.  Each request gets one or two response frames,
always in request order.
"""
from __future__ import annotations

import socket
import struct
from enum import IntEnum
from typing import BinaryIO

from .circuits import EncryptedCounter, EncryptedPattern, OpCounters
from .enc_data import EncryptedRecord, EncryptedWord, TableSchema, read_schema, record_from_flat, serialize_schema
from .errors import HedbError, MalformedFrame, PayloadTooLarge, ServerError, ShapeMismatch, TruncatedPayload
from .he_core import (
    BootstrapKey,
    Ciphertext,
    PublicKey,
    SecurityParams,
    read_many,
    serialize_many,
)
from .sql_front import KINDS, CompiledQuery, QueryParams, QueryShape

MAGIC = b"HEDB"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
DEFAULT_MAX_PAYLOAD = 256 * 1024 * 1024


class MsgType(IntEnum):
    CREATE_TABLE = 1
    INSERT_ROW = 2
    QUERY = 3
    RESULT = 4
    COUNTERS = 5
    ERROR = 6
    PING = 7


ERROR_CODES = (
    "Error", "MalformedFrame", "PayloadTooLarge", "UnknownTable", "DuplicateTable",
    "InvalidSchema", "SchemaMismatch", "ShapeMismatch", "MalformedHeader",
    "TruncatedPayload", "NoiseOverflow", "BootstrapUnavailable", "WidthMismatch",
    "ValueOverflow", "UnknownMessage",
)
_CODE_NUM = {name: i for i, name in enumerate(ERROR_CODES)}
OP_CODES = {"eq": 1, "lt": 2, "gt": 3, "pattern": 4}
_OP_NAMES = {v: k for k, v in OP_CODES.items()}


# ------------------------------------------------------------------ frames


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(payload)) + payload


def decode_header(header: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[MsgType, int]:
    magic, version, mtype, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise MalformedFrame("bad frame magic")
    if version != VERSION:
        raise MalformedFrame(f"unsupported protocol version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise MalformedFrame(f"unknown message type {mtype}") from None
    if length > max_payload:
        raise PayloadTooLarge(f"payload of {length} bytes exceeds limit {max_payload}")
    return mtype, length


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if got == 0:
                return None
            raise MalformedFrame("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[MsgType, bytes] | None:
    """Next frame from ``stream``; ``None`` on a clean end of stream."""
    header = _read_exact(stream, HEADER.size)
    if header is None:
        return None
    mtype, length = decode_header(header, max_payload)
    payload = _read_exact(stream, length) if length else b""
    if payload is None:
        raise MalformedFrame("connection closed before payload")
    return mtype, payload


# -------------------------------------------------------------- primitives


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


def _unpack_str(buf: memoryview, off: int) -> tuple[str, int]:
    if off + 2 > len(buf):
        raise TruncatedPayload("string length truncated")
    (n,) = struct.unpack_from(">H", buf, off)
    off += 2
    if off + n > len(buf):
        raise TruncatedPayload("string truncated")
    return bytes(buf[off : off + n]).decode("utf-8", errors="replace"), off + n


def _pack_int(x: int) -> bytes:
    raw = x.to_bytes((x.bit_length() + 7) // 8, "big")
    return struct.pack(">I", len(raw)) + raw


def _unpack_int(buf: memoryview, off: int) -> tuple[int, int]:
    if off + 4 > len(buf):
        raise TruncatedPayload("integer length truncated")
    (n,) = struct.unpack_from(">I", buf, off)
    off += 4
    if off + n > len(buf):
        raise TruncatedPayload("integer truncated")
    return int.from_bytes(buf[off : off + n], "big"), off + n


def _unpack(fmt: str, buf: memoryview, off: int) -> tuple[tuple, int]:
    size = struct.calcsize(fmt)
    if off + size > len(buf):
        raise TruncatedPayload("field truncated")
    return struct.unpack_from(fmt, buf, off), off + size


# ----------------------------------------------------------- public context


def serialize_public(pk: PublicKey) -> bytes:
    """Public evaluation context: parameters, ``x0`` and the squash vector."""
    p = pk.params
    out = [struct.pack(">IIIIII", p.lam, p.p_bits, p.alpha, p.beta, p.frac_bits, len(pk.y))]
    out.append(_pack_int(pk.x0))
    out += [_pack_int(y) for y in pk.y]
    return b"".join(out)


def read_public(buf: bytes | memoryview, off: int = 0) -> tuple[PublicKey, int]:
    buf = memoryview(buf)
    (lam, p_bits, alpha, beta, frac_bits, ny), off = _unpack(">IIIIII", buf, off)
    try:
        params = SecurityParams(lam, lam, p_bits, lam**5, alpha, beta, frac_bits)
    except ValueError as exc:
        raise ShapeMismatch(f"bad public parameters: {exc}") from None
    x0, off = _unpack_int(buf, off)
    ys = []
    for _ in range(ny):
        y, off = _unpack_int(buf, off)
        ys.append(y)
    return PublicKey(params, x0, (), tuple(ys)), off


def serialize_bootstrap(pk: PublicKey, bk: BootstrapKey) -> bytes:
    return b"HEDB-BOOT v1" + serialize_public(pk) + serialize_many(bk.enc_s)


def parse_bootstrap(data: bytes) -> tuple[PublicKey, BootstrapKey]:
    if not data.startswith(b"HEDB-BOOT v1"):
        raise MalformedFrame("not a bootstrap key file")
    pk, off = read_public(data, 12)
    enc_s, off = read_many(data, off)
    if off != len(data):
        raise TruncatedPayload("trailing bytes in bootstrap key file")
    return pk, BootstrapKey(tuple(enc_s))


# ---------------------------------------------------------------- messages


def encode_create_table(schema: TableSchema, pk: PublicKey) -> bytes:
    return serialize_schema(schema) + serialize_public(pk)


def decode_create_table(payload: bytes) -> tuple[TableSchema, PublicKey]:
    schema, off = read_schema(payload)
    pk, off = read_public(payload, off)
    if off != len(payload):
        raise MalformedFrame("trailing bytes in CREATE_TABLE")
    return schema, pk


def encode_insert(table: str, row: EncryptedRecord) -> bytes:
    return _pack_str(table) + serialize_many(row.flat())


def decode_insert(payload: bytes) -> tuple[str, list[Ciphertext]]:
    buf = memoryview(payload)
    table, off = _unpack_str(buf, 0)
    cts, off = read_many(buf, off)
    if off != len(buf):
        raise MalformedFrame("trailing bytes in INSERT_ROW")
    return table, cts


def encode_shape(shape: QueryShape) -> bytes:
    return b"".join([
        struct.pack(">B", KINDS.index(shape.kind)),
        _pack_str(shape.table),
        _pack_str(shape.column),
        struct.pack(">BHH", OP_CODES[shape.op], shape.operand_width, len(shape.pattern_mask)),
        bytes(int(m) for m in shape.pattern_mask),
        struct.pack(">BH", int(shape.prefix_only), shape.eta_width),
        _pack_str(shape.target_col),
        struct.pack(">I", shape.update_bits),
    ])


def decode_shape(buf: memoryview, off: int = 0) -> tuple[QueryShape, int]:
    (kind,), off = _unpack(">B", buf, off)
    if kind >= len(KINDS):
        raise ShapeMismatch(f"unknown statement kind byte {kind}")
    table, off = _unpack_str(buf, off)
    column, off = _unpack_str(buf, off)
    (op, width, nmask), off = _unpack(">BHH", buf, off)
    if op not in _OP_NAMES:
        raise ShapeMismatch(f"unknown operator byte {op}")
    if off + nmask > len(buf):
        raise TruncatedPayload("pattern mask truncated")
    mask = tuple(bool(b) for b in bytes(buf[off : off + nmask]))
    off += nmask
    (prefix, eta_width), off = _unpack(">BH", buf, off)
    target, off = _unpack_str(buf, off)
    (update_bits,), off = _unpack(">I", buf, off)
    shape = QueryShape(
        KINDS[kind], table, column, _OP_NAMES[op], width, mask, bool(prefix),
        eta_width, target, update_bits,
    )
    return shape, off


def query_ciphertexts(q: CompiledQuery) -> list[Ciphertext]:
    """Operand bits, then eta bits, then the update record, in storage order."""
    p = q.params
    operand = p.operand.literal_bits if isinstance(p.operand, EncryptedPattern) else p.operand
    cts = list(operand.bits)
    if p.eta is not None:
        cts += p.eta.bits.bits
    if p.update is not None:
        cts += p.update.flat()
    return cts


def encode_query(q: CompiledQuery) -> bytes:
    return encode_shape(q.shape) + serialize_many(query_ciphertexts(q))


def decode_query(payload: bytes, schema_of) -> CompiledQuery:
    """Rebuild a compiled query; ``schema_of(table)`` resolves the table schema."""
    buf = memoryview(payload)
    shape, off = decode_shape(buf)
    cts, off = read_many(buf, off)
    if off != len(buf):
        raise MalformedFrame("trailing bytes in QUERY")
    schema = schema_of(shape.table)
    check_shape(shape, schema, len(cts))
    w = shape.operand_width
    word = EncryptedWord(tuple(cts[:w]))
    operand = EncryptedPattern(word, shape.pattern_mask, shape.prefix_only) if shape.op == "pattern" else word
    pos = w
    eta = None
    if shape.eta_width:
        eta = EncryptedCounter(EncryptedWord(tuple(cts[pos : pos + shape.eta_width])))
        pos += shape.eta_width
    update = record_from_flat(cts[pos:], schema) if shape.update_bits else None
    return CompiledQuery(shape, QueryParams(operand, eta, update))


def check_shape(shape: QueryShape, schema: TableSchema, n_cts: int) -> None:
    try:
        col = schema.column(shape.column)
    except KeyError:
        raise ShapeMismatch(f"no column {shape.column!r} in {schema.table_name}") from None
    if shape.operand_width != col.bit_width:
        raise ShapeMismatch(f"operand is {shape.operand_width} bits, column has {col.bit_width}")
    if shape.op == "pattern":
        if col.kind != "string" or len(shape.pattern_mask) != col.chars:
            raise ShapeMismatch("pattern mask does not cover the column")
    elif shape.pattern_mask:
        raise ShapeMismatch("pattern mask given for a non-pattern operator")
    if (shape.kind == "select") != (shape.eta_width > 0):
        raise ShapeMismatch("eta is present exactly for SELECT")
    if shape.kind == "update":
        if shape.update_bits != schema.record_bits:
            raise ShapeMismatch("update record width does not match the schema")
    elif shape.update_bits:
        raise ShapeMismatch("update record given for a non-UPDATE statement")
    if shape.kind == "avg":
        try:
            target = schema.column(shape.target_col)
        except KeyError:
            raise ShapeMismatch(f"no column {shape.target_col!r}") from None
        if target.kind != "uint":
            raise ShapeMismatch("AVG target must be a uint column")
    expected = shape.operand_width + shape.eta_width + shape.update_bits
    if n_cts != expected:
        raise ShapeMismatch(f"expected {expected} ciphertexts, got {n_cts}")


def encode_result(cts: list[Ciphertext], frac_bits: int | None = None) -> bytes:
    return serialize_many(cts, frac_bits)


def decode_result(payload: bytes) -> list[Ciphertext]:
    cts, off = read_many(payload)
    if off != len(payload):
        raise MalformedFrame("trailing bytes in RESULT")
    return cts


def encode_error(exc: HedbError | str, message: str = "") -> bytes:
    code = exc.code if isinstance(exc, HedbError) else exc
    msg = message or (str(exc) if isinstance(exc, HedbError) else "")
    return struct.pack(">H", _CODE_NUM.get(code, 0)) + msg.encode("utf-8")


def decode_error(payload: bytes) -> ServerError:
    if len(payload) < 2:
        return ServerError("MalformedFrame", "short ERROR payload")
    (num,) = struct.unpack_from(">H", payload)
    code = ERROR_CODES[num] if num < len(ERROR_CODES) else "Error"
    return ServerError(code, payload[2:].decode("utf-8", errors="replace"))


# ------------------------------------------------------------------ client


class Connection:
    """Blocking request/response channel to a server."""

    def __init__(self, host: str, port: int, timeout: float | None = None,
                 max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        self.max_payload = max_payload

    @classmethod
    def from_address(cls, address: str, **kw) -> "Connection":
        host, _, port = address.rpartition(":")
        return cls(host or "127.0.0.1", int(port), **kw)

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        self.sock.sendall(encode_frame(msg_type, payload))

    def recv(self) -> tuple[MsgType, bytes]:
        frame = read_frame(self.rfile, self.max_payload)
        if frame is None:
            raise MalformedFrame("server closed the connection")
        mtype, payload = frame
        if mtype == MsgType.ERROR:
            raise decode_error(payload)
        return mtype, payload

    def request(self, msg_type: int, payload: bytes = b"") -> tuple[MsgType, bytes]:
        self.send(msg_type, payload)
        return self.recv()

    def query(self, q: CompiledQuery) -> tuple[list[Ciphertext], OpCounters]:
        self.send(MsgType.QUERY, encode_query(q))
        mtype, payload = self.recv()
        if mtype != MsgType.RESULT:
            raise MalformedFrame(f"expected RESULT, got {mtype.name}")
        cts = decode_result(payload)
        mtype, payload = self.recv()
        if mtype != MsgType.COUNTERS:
            raise MalformedFrame(f"expected COUNTERS, got {mtype.name}")
        return cts, OpCounters.from_bytes(payload)

    def close(self) -> None:
        try:
            self.rfile.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
