"""Tokenizer, parser, validator and compiler for the supported SQL subset.

Grammar (keywords case-insensitive, identifiers case-sensitive)::

    query  := select | update | delete | count | avg
    select := SELECT * FROM ident WHERE pred
    update := UPDATE ident SET assign ("," assign)* WHERE pred
    delete := DELETE FROM ident WHERE pred
    count  := SELECT COUNT ( * ) FROM ident WHERE pred
    avg    := SELECT AVG ( ident ) FROM ident WHERE pred
    pred   := ident ("=" | "<" | ">") literal
    assign := ident "=" literal

A string literal on the right of ``=`` that contains ``?`` (any one
character) or a final ``*`` (any suffix) is a pattern.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Union

from .circuits import EncryptedCounter, EncryptedPattern
from .enc_data import (
    ColumnSpec,
    EncryptedRecord,
    EncryptedWord,
    TableSchema,
    encode_record,
    encode_word,
    plain_bits,
    string_bytes,
)
from .errors import (
    BadPattern,
    InvalidCharacter,
    PartialUpdateUnsupported,
    PatternTooLong,
    QuerySyntaxError,
    TypeMismatch,
    UnknownColumn,
    UnsupportedFeature,
    ValueOverflow,
)
from .he_core import PublicKey, SecretKey, encrypt_bit, _rng

Literal = Union[int, str]

KEYWORDS = {"SELECT", "FROM", "WHERE", "UPDATE", "SET", "DELETE", "COUNT", "AVG"}
UNSUPPORTED = {
    "AND", "OR", "NOT", "JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "ON", "ORDER",
    "GROUP", "BY", "HAVING", "LIMIT", "OFFSET", "INSERT", "INTO", "VALUES", "UNION",
    "DISTINCT", "SUM", "MIN", "MAX", "LIKE", "IN", "BETWEEN", "IS", "NULL", "AS",
    "CREATE", "DROP", "ALTER",
}
KINDS = ("select", "update", "delete", "count", "avg")
DEFAULT_ETA_BITS = 8
OPS = {"=": "eq", "<": "lt", ">": "gt", "like": "pattern"}


@dataclass(frozen=True)
class Token:
    kind: str  # kw | ident | int | str | sym | eof
    value: object
    offset: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        start = i
        if ch.isalpha() or ch == "_":
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i += 1
            word = text[start:i]
            up = word.upper()
            if up in KEYWORDS:
                tokens.append(Token("kw", up, start))
            elif up in UNSUPPORTED:
                raise UnsupportedFeature(f"{up} is not supported", _byte(text, start))
            else:
                tokens.append(Token("ident", word, start))
        elif ch.isdigit():
            while i < n and text[i].isdigit():
                i += 1
            if i < n and (text[i].isalpha() or text[i] == "_" or text[i] == "."):
                raise QuerySyntaxError("malformed number", _byte(text, start))
            tokens.append(Token("int", int(text[start:i]), start))
        elif ch == "'":
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise QuerySyntaxError("unterminated string literal", _byte(text, start))
                if text[i] == "'":
                    if i + 1 < n and text[i + 1] == "'":
                        buf.append("'")
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(text[i])
                i += 1
            tokens.append(Token("str", "".join(buf), start))
        elif ch in "*(),=<>;":
            if ch in "<>" and i + 1 < n and text[i + 1] in "=>":
                raise UnsupportedFeature(
                    f"operator {text[i:i + 2]} is not supported", _byte(text, start)
                )
            tokens.append(Token("sym", ch, start))
            i += 1
        elif ch == "!" and i + 1 < n and text[i + 1] == "=":
            raise UnsupportedFeature("operator != is not supported", _byte(text, start))
        else:
            raise QuerySyntaxError(f"unexpected character {ch!r}", _byte(text, start))
    tokens.append(Token("eof", None, n))
    return tokens


def _byte(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


@dataclass(frozen=True)
class Condition:
    column: str
    op: str  # "=", "<", ">" or "like"
    literal: Literal


@dataclass(frozen=True)
class QueryAst:
    kind: str
    table: str
    predicate: Condition
    n: int | None = None
    assignments: tuple[tuple[str, Literal], ...] | None = None
    target_col: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown statement kind {self.kind!r}")
        if (self.n is not None) != (self.kind == "select"):
            raise ValueError("n is present exactly for SELECT")
        if (self.assignments is not None) != (self.kind == "update"):
            raise ValueError("assignments are present exactly for UPDATE")
        if (self.target_col is not None) != (self.kind == "avg"):
            raise ValueError("target_col is present exactly for AVG")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.peek()
        return QuerySyntaxError(msg, _byte(self.text, tok.offset))

    def expect_kw(self, kw: str) -> None:
        tok = self.next()
        if tok.kind != "kw" or tok.value != kw:
            raise self.error(f"expected {kw}", tok)

    def expect_sym(self, sym: str) -> None:
        tok = self.next()
        if tok.kind != "sym" or tok.value != sym:
            raise self.error(f"expected {sym!r}", tok)

    def ident(self) -> str:
        tok = self.next()
        if tok.kind != "ident":
            raise self.error("expected an identifier", tok)
        return tok.value

    def literal(self) -> Literal:
        tok = self.next()
        if tok.kind not in ("int", "str"):
            raise self.error("expected a literal", tok)
        return tok.value

    def parse(self) -> QueryAst:
        tok = self.peek()
        if tok.kind != "kw":
            raise self.error("expected SELECT, UPDATE or DELETE")
        if tok.value == "SELECT":
            ast = self.select()
        elif tok.value == "UPDATE":
            ast = self.update()
        elif tok.value == "DELETE":
            self.next()
            self.expect_kw("FROM")
            table = self.ident()
            ast = QueryAst("delete", table, self.where())
        else:
            raise self.error("expected SELECT, UPDATE or DELETE")
        if self.peek().kind == "sym" and self.peek().value == ";":
            self.next()
        if self.peek().kind != "eof":
            raise self.error("unexpected trailing input")
        return ast

    def select(self) -> QueryAst:
        self.expect_kw("SELECT")
        tok = self.next()
        if tok.kind == "sym" and tok.value == "*":
            self.expect_kw("FROM")
            table = self.ident()
            return QueryAst("select", table, self.where(), n=1)
        if tok.kind == "kw" and tok.value == "COUNT":
            self.expect_sym("(")
            self.expect_sym("*")
            self.expect_sym(")")
            self.expect_kw("FROM")
            table = self.ident()
            return QueryAst("count", table, self.where())
        if tok.kind == "kw" and tok.value == "AVG":
            self.expect_sym("(")
            target = self.ident()
            self.expect_sym(")")
            self.expect_kw("FROM")
            table = self.ident()
            return QueryAst("avg", table, self.where(), target_col=target)
        if tok.kind == "ident":
            raise UnsupportedFeature(
                "column projections are not supported; use SELECT *", _byte(self.text, tok.offset)
            )
        raise self.error("expected *, COUNT(*) or AVG(column)", tok)

    def update(self) -> QueryAst:
        self.expect_kw("UPDATE")
        table = self.ident()
        self.expect_kw("SET")
        assigns = [self.assign()]
        while self.peek().kind == "sym" and self.peek().value == ",":
            self.next()
            assigns.append(self.assign())
        return QueryAst("update", table, self.where(), assignments=tuple(assigns))

    def assign(self) -> tuple[str, Literal]:
        col = self.ident()
        self.expect_sym("=")
        return col, self.literal()

    def where(self) -> Condition:
        tok = self.peek()
        if tok.kind == "eof":
            raise UnsupportedFeature("a WHERE clause is required", _byte(self.text, tok.offset))
        self.expect_kw("WHERE")
        col = self.ident()
        tok = self.next()
        if tok.kind != "sym" or tok.value not in "=<>":
            raise self.error("expected =, < or >", tok)
        lit = self.literal()
        op = tok.value
        if op == "=" and isinstance(lit, str) and ("*" in lit or "?" in lit):
            op = "like"
        return Condition(col, op, lit)


def parse(text: str) -> QueryAst:
    return _Parser(text).parse()


def _render_literal(lit: Literal) -> str:
    if isinstance(lit, int):
        return str(lit)
    return "'" + lit.replace("'", "''") + "'"


def render(ast: QueryAst) -> str:
    """Canonical SQL text for ``ast``; ``parse(render(ast)) == ast``."""
    p = ast.predicate
    op = "=" if p.op == "like" else p.op
    where = f"WHERE {p.column} {op} {_render_literal(p.literal)}"
    if ast.kind == "select":
        return f"SELECT * FROM {ast.table} {where}"
    if ast.kind == "count":
        return f"SELECT COUNT(*) FROM {ast.table} {where}"
    if ast.kind == "avg":
        return f"SELECT AVG({ast.target_col}) FROM {ast.table} {where}"
    if ast.kind == "delete":
        return f"DELETE FROM {ast.table} {where}"
    sets = ", ".join(f"{c} = {_render_literal(v)}" for c, v in ast.assignments)
    return f"UPDATE {ast.table} SET {sets} {where}"


# ---------------------------------------------------------------- validate


@dataclass(frozen=True)
class CheckedQuery:
    """A query validated against a schema, annotated with column widths."""

    ast: QueryAst
    schema: TableSchema
    widths: dict = field(compare=False, hash=False)

    @property
    def column(self) -> ColumnSpec:
        return self.schema.column(self.ast.predicate.column)


def pattern_mask(pattern: str, chars: int) -> tuple[tuple[bool, ...], bool, str]:
    """Per-character literal flags, prefix flag and the literal text (``?`` as NUL)."""
    if "*" in pattern[:-1]:
        raise BadPattern(f"'*' may only end a pattern: {pattern!r}")
    prefix = pattern.endswith("*")
    body = pattern[:-1] if prefix else pattern
    if len(body.encode("latin-1", errors="replace")) > chars:
        raise PatternTooLong(f"pattern {pattern!r} is longer than {chars} characters")
    mask = [ch != "?" for ch in body]
    mask += [not prefix] * (chars - len(body))
    return tuple(mask), prefix, body.replace("?", "\x00")


def _check_literal(lit: Literal, col: ColumnSpec) -> None:
    if col.kind == "uint":
        if not isinstance(lit, int):
            raise TypeMismatch(f"column {col.name} is uint, got a string literal")
        if lit >= 1 << col.bit_width:
            raise ValueOverflow(f"{lit} does not fit in {col.bit_width}-bit column {col.name}")
    else:
        if not isinstance(lit, str):
            raise TypeMismatch(f"column {col.name} is a string column, got a number")
        try:
            string_bytes(lit, col.chars)
        except InvalidCharacter as exc:
            raise TypeMismatch(str(exc)) from exc


def _column(schema: TableSchema, name: str) -> ColumnSpec:
    try:
        return schema.column(name)
    except KeyError:
        raise UnknownColumn(f"no column {name!r} in table {schema.table_name}") from None


def validate(ast: QueryAst, schema: TableSchema) -> CheckedQuery:
    if ast.table != schema.table_name:
        raise UnknownColumn(f"query targets {ast.table!r}, schema is {schema.table_name!r}")
    pred = ast.predicate
    col = _column(schema, pred.column)
    if pred.op == "like":
        if col.kind != "string":
            raise BadPattern("wildcards apply to string columns only")
        pattern_mask(pred.literal, col.chars)
    else:
        if pred.op in "<>" and isinstance(pred.literal, str) and (
            "*" in pred.literal or "?" in pred.literal
        ):
            raise BadPattern("wildcards are only allowed with '='")
        _check_literal(pred.literal, col)
    if ast.kind == "avg":
        target = _column(schema, ast.target_col)
        if target.kind != "uint":
            raise TypeMismatch(f"AVG needs a uint column, {target.name} is a string")
    if ast.kind == "update":
        seen = {}
        for name, lit in ast.assignments:
            c = _column(schema, name)
            if name in seen:
                raise PartialUpdateUnsupported(f"column {name} assigned twice")
            _check_literal(lit, c)
            seen[name] = lit
        missing = [c.name for c in schema.columns if c.name not in seen]
        if missing:
            raise PartialUpdateUnsupported(
                "UPDATE must assign every column; missing " + ", ".join(missing)
            )
    if ast.kind == "select" and (ast.n is None or ast.n < 1):
        raise ValueOverflow("n must be a positive integer")
    return CheckedQuery(ast, schema, {c.name: c.bit_width for c in schema.columns})


# ----------------------------------------------------------------- compile


@dataclass(frozen=True)
class QueryShape:
    """Public structure of a query; never holds a literal value."""

    kind: str
    table: str
    column: str
    op: str  # eq | lt | gt | pattern
    operand_width: int
    pattern_mask: tuple[bool, ...] = ()
    prefix_only: bool = False
    eta_width: int = 0
    target_col: str = ""
    update_bits: int = 0


@dataclass(frozen=True)
class QueryParams:
    operand: EncryptedWord | EncryptedPattern
    eta: EncryptedCounter | None = None
    update: EncryptedRecord | None = None


@dataclass(frozen=True)
class CompiledQuery:
    shape: QueryShape
    params: QueryParams


def compile_query(
    checked: CheckedQuery,
    key: SecretKey | PublicKey,
    n: int | None = None,
    seed: int | random.Random | None = None,
    *,
    eta_bits: int = DEFAULT_ETA_BITS,
) -> CompiledQuery:
    """Encrypt every literal of ``checked``; ``n`` overrides the AST's match number."""
    rng = _rng(seed)
    ast, schema = checked.ast, checked.schema
    col = checked.column
    pred = ast.predicate

    mask, prefix = (), False
    if pred.op == "like":
        mask, prefix, body = pattern_mask(pred.literal, col.chars)
        bits = [(byte >> b) & 1 for byte in body.encode("latin-1").ljust(col.chars, b"\x00") for b in range(8)]
        word = EncryptedWord(tuple(encrypt_bit(b, key, rng) for b in bits))
        operand = EncryptedPattern(word, mask, prefix)
    else:
        operand = encode_word(pred.literal, col, key, rng)

    eta = None
    eta_width = 0
    if ast.kind == "select":
        n = ast.n if n is None else n
        if n < 1:
            raise ValueOverflow("n must be a positive integer")
        if n >= 1 << eta_bits:
            raise ValueOverflow(f"n={n} does not fit in {eta_bits} bits")
        eta_width = eta_bits
        eta_spec = ColumnSpec("n", "uint", eta_bits)
        eta = EncryptedCounter(EncryptedWord(tuple(
            encrypt_bit(b, key, rng) for b in plain_bits(n, eta_spec)
        )))

    update = None
    if ast.kind == "update":
        values = dict(ast.assignments)
        update = encode_record([values[c.name] for c in schema.columns], schema, key, rng)

    shape = QueryShape(
        kind=ast.kind,
        table=ast.table,
        column=pred.column,
        op=OPS[pred.op],
        operand_width=col.bit_width,
        pattern_mask=mask,
        prefix_only=prefix,
        eta_width=eta_width,
        target_col=ast.target_col or "",
        update_bits=schema.record_bits if update is not None else 0,
    )
    return CompiledQuery(shape, QueryParams(operand, eta, update))
