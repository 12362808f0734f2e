import dataclasses
import random

import pytest
from hypothesis import given, strategies as st

from hedb.enc_data import TableSchema, decode_record, decode_word
from hedb.errors import (
    BadPattern,
    PartialUpdateUnsupported,
    PatternTooLong,
    QuerySyntaxError,
    TypeMismatch,
    UnknownColumn,
    UnsupportedFeature,
    ValueOverflow,
)
from hedb.he_core import SecurityParams, decrypt_bit, keygen
from hedb.sql_front import (
    KEYWORDS,
    UNSUPPORTED,
    Condition,
    QueryAst,
    compile_query,
    parse,
    pattern_mask,
    render,
    tokenize,
    validate,
)
from hedb.wire import encode_query

SCHEMA = TableSchema.from_text("patients", "name:string:48\nage:uint:8\nward:uint:8\n")


@pytest.fixture(scope="module")
def keys():
    return keygen(SecurityParams.from_lambda(2), seed=77)


# -- parsing -------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,ast",
    [
        ("SELECT * FROM patients WHERE name = 'Alice'",
         QueryAst("select", "patients", Condition("name", "=", "Alice"), n=1)),
        ("select * from patients where age < 40;",
         QueryAst("select", "patients", Condition("age", "<", 40), n=1)),
        ("SELECT COUNT(*) FROM patients WHERE ward > 2",
         QueryAst("count", "patients", Condition("ward", ">", 2))),
        ("SELECT AVG(age) FROM patients WHERE name = 'A*'",
         QueryAst("avg", "patients", Condition("name", "like", "A*"), target_col="age")),
        ("DELETE FROM patients WHERE name = 'B?b'",
         QueryAst("delete", "patients", Condition("name", "like", "B?b"))),
        ("UPDATE patients SET name = 'x', age = 1, ward = 2 WHERE age = 3",
         QueryAst("update", "patients", Condition("age", "=", 3),
                  assignments=(("name", "x"), ("age", 1), ("ward", 2)))),
        ("SELECT * FROM patients WHERE name = 'O''Neil'",
         QueryAst("select", "patients", Condition("name", "=", "O'Neil"), n=1)),
    ],
)
def test_parse(text, ast):
    assert parse(text) == ast


@pytest.mark.parametrize(
    "text,offset",
    [
        ("SELECT * FROM t WHERE a = 1 AND b = 2", 28),
        ("SELECT * FROM t WHERE a <= 1", 24),
        ("SELECT * FROM t WHERE a <> 1", 24),
        ("SELECT * FROM t WHERE a != 1", 24),
        ("SELECT a FROM t WHERE a = 1", 7),
        ("SELECT * FROM t", 15),
        ("SELECT * FROM t ORDER BY a", 16),
        ("SELECT * FROM t JOIN u ON a = b", 16),
    ],
)
def test_unsupported_features(text, offset):
    with pytest.raises(UnsupportedFeature) as info:
        parse(text)
    assert info.value.offset == offset


@pytest.mark.parametrize(
    "text,offset",
    [
        ("SELECT * FROM t WHERE a = 'x", 26),
        ("SELECT * FROM t WHERE a = 12ab", 26),
        ("SELECT * FROM t WHERE a = 1 extra", 28),
        ("SELECT * t WHERE a = 1", 9),
        ("FROM t", 0),
        ("SELECT * FROM t WHERE a = 1 @", 28),
        ("SELECT * FROM t WHERE a = b", 26),
        ("UPDATE t SET WHERE a = 1", 13),
    ],
)
def test_syntax_errors_carry_offsets(text, offset):
    with pytest.raises(QuerySyntaxError) as info:
        parse(text)
    assert info.value.offset == offset
    assert type(info.value) is QuerySyntaxError


def test_offsets_are_bytes():
    with pytest.raises(QuerySyntaxError) as info:
        parse("SELECT * FROM t WHERE a = 'é' #")
    assert info.value.offset == len("SELECT * FROM t WHERE a = 'é' ".encode())


def test_keywords_case_insensitive_identifiers_not():
    toks = tokenize("sElEcT Name")
    assert toks[0].value == "SELECT" and toks[1].value == "Name"


def test_ast_invariants():
    with pytest.raises(ValueError):
        QueryAst("select", "t", Condition("a", "=", 1))
    with pytest.raises(ValueError):
        QueryAst("count", "t", Condition("a", "=", 1), n=1)
    with pytest.raises(ValueError):
        QueryAst("drop", "t", Condition("a", "=", 1))


idents = st.from_regex(r"[a-z_][a-z0-9_]{0,6}", fullmatch=True).filter(
    lambda s: s.upper() not in KEYWORDS | UNSUPPORTED
)


literals = st.one_of(
    st.integers(0, 2**20),
    st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=6),
)


@st.composite
def asts(draw):
    kind = draw(st.sampled_from(["select", "update", "delete", "count", "avg"]))
    lit = draw(literals)
    op = draw(st.sampled_from(["=", "<", ">"]))
    if isinstance(lit, str) and ("*" in lit or "?" in lit):
        op = "like"
    cond = Condition(draw(idents), op, lit)
    table = draw(idents)
    if kind == "select":
        return QueryAst(kind, table, cond, n=1)
    if kind == "avg":
        return QueryAst(kind, table, cond, target_col=draw(idents))
    if kind == "update":
        assigns = draw(st.lists(st.tuples(idents, literals), min_size=1, max_size=3))
        return QueryAst(kind, table, cond, assignments=tuple(assigns))
    return QueryAst(kind, table, cond)


@given(asts())
def test_render_parse_round_trip(ast):
    assert parse(render(ast)) == ast


# -- validation -----------------------------------------------------------------


@pytest.mark.parametrize(
    "text,exc",
    [
        ("SELECT * FROM patients WHERE height = 1", UnknownColumn),
        ("SELECT * FROM others WHERE age = 1", UnknownColumn),
        ("SELECT * FROM patients WHERE age = 'x'", TypeMismatch),
        ("SELECT * FROM patients WHERE name = 3", TypeMismatch),
        ("SELECT * FROM patients WHERE age = 256", ValueOverflow),
        ("SELECT * FROM patients WHERE name = 'abcdefg'", ValueOverflow),
        ("SELECT * FROM patients WHERE name = 'a*b'", BadPattern),
        ("SELECT * FROM patients WHERE name < 'a*'", BadPattern),
        ("SELECT * FROM patients WHERE name = 'abcdefg*'", PatternTooLong),
        ("SELECT AVG(name) FROM patients WHERE age = 1", TypeMismatch),
        ("UPDATE patients SET age = 1 WHERE age = 2", PartialUpdateUnsupported),
        ("UPDATE patients SET age = 1, age = 2, name = 'a', ward = 1 WHERE age = 2",
         PartialUpdateUnsupported),
        ("UPDATE patients SET age = 1, name = 'a', ward = 999 WHERE age = 2", ValueOverflow),
    ],
)
def test_validation_errors(text, exc):
    with pytest.raises(exc):
        validate(parse(text), SCHEMA)


def test_select_n_must_be_positive():
    ast = dataclasses.replace(parse("SELECT * FROM patients WHERE age = 1"), n=0)
    with pytest.raises(ValueOverflow):
        validate(ast, SCHEMA)


def test_pattern_mask():
    assert pattern_mask("a?c", 4) == ((True, False, True, True), False, "a\x00c")
    assert pattern_mask("ab*", 4) == ((True, True, False, False), True, "ab")
    assert pattern_mask("*", 2) == ((False, False), True, "")
    with pytest.raises(BadPattern):
        pattern_mask("*a", 4)
    with pytest.raises(PatternTooLong):
        pattern_mask("abcde", 4)


# -- compilation ---------------------------------------------------------------------


def test_compile_select_shapes(keys):
    sk, _, _ = keys
    q = compile_query(validate(parse("SELECT * FROM patients WHERE age = 33"), SCHEMA), sk, 5, 1)
    assert q.shape.kind == "select" and q.shape.op == "eq" and q.shape.eta_width == 8
    assert decode_word(q.params.operand, SCHEMA.column("age"), sk) == 33
    assert sum(decrypt_bit(b, sk) << i for i, b in enumerate(q.params.eta.bits.bits)) == 5
    with pytest.raises(ValueOverflow):
        compile_query(validate(parse("SELECT * FROM patients WHERE age = 1"), SCHEMA), sk, 256, 1)


def test_compile_update_and_pattern(keys):
    sk, _, _ = keys
    text = "UPDATE patients SET ward = 4, name = 'Zoe', age = 9 WHERE name = 'Z?e*'"
    q = compile_query(validate(parse(text), SCHEMA), sk, seed=2)
    assert q.shape.op == "pattern" and q.shape.prefix_only
    assert q.shape.pattern_mask == (True, False, True, False, False, False)
    assert q.shape.update_bits == SCHEMA.record_bits
    assert decode_record(q.params.update, SCHEMA, sk) == ("Zoe", 9, 4)


def _scan_for_literals(ast, payload: bytes, shape) -> list[str]:
    leaks = []
    shape_text = repr(shape).encode()
    lits = [ast.predicate.literal] + [v for _, v in ast.assignments or ()]
    for lit in lits:
        if isinstance(lit, str) and len(lit) >= 3:
            raw = lit.encode("latin-1")
            if raw in payload or raw in shape_text:
                leaks.append(lit)
        elif isinstance(lit, int) and lit >= 100 and str(lit).encode() in shape_text:
            leaks.append(str(lit))
    return leaks


def test_no_literal_leaks_in_compiled_queries(keys):
    sk, _, _ = keys
    rng = random.Random(500)
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    leaks = []
    for trial in range(500):
        name = "".join(rng.choice(letters) for _ in range(rng.randint(3, 6)))
        age, ward = rng.randrange(100, 256), rng.randrange(100, 256)
        text = rng.choice([
            f"SELECT * FROM patients WHERE name = '{name}'",
            f"SELECT * FROM patients WHERE age < {age}",
            f"SELECT COUNT(*) FROM patients WHERE name > '{name}'",
            f"SELECT AVG(age) FROM patients WHERE ward = {ward}",
            f"DELETE FROM patients WHERE name = '{name[:3]}*'",
            f"UPDATE patients SET name = '{name}', age = {age}, ward = {ward} WHERE age = {age}",
        ])
        ast = parse(text)
        q = compile_query(validate(ast, SCHEMA), sk, None, rng)
        leaks += _scan_for_literals(ast, encode_query(q), q.shape)
    assert leaks == []
