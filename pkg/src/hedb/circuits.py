"""Homomorphic query circuits over bit-encrypted tables.

Every function here runs without key material: control flow depends only on
the public schema, the row count and the query shape, never on plaintext
values.  That is what makes the server blind, and it is also why the
operation counters are a pure function of the query shape.

Gate vocabulary: XOR is homomorphic addition, AND is homomorphic
multiplication, NOT x is ``1 xor x`` with a trivial constant 1.
"""
from __future__ import annotations

import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

from .enc_data import EncryptedRecord, EncryptedTable, EncryptedWord, TableSchema
from .errors import NoiseOverflow, PatternTooLong, SchemaMismatch, WidthMismatch
from .he_core import (
    BootstrapKey,
    Ciphertext,
    PublicKey,
    bits_needed,
    recrypt,
    recrypt_noise_bound,
    trivial,
)

T = TypeVar("T")
R = TypeVar("R")

# Single-gate faults that the differential harness must be able to detect.
FAULTS = (
    "eq_drop_one",
    "lt_drop_negation",
    "increment_carry_xor",
    "nth_skip_index",
    "select_mask_with_match",
    "update_keep_with_match",
    "delete_keep_with_match",
    "pattern_ignore_mask",
)


class OpCounters:
    """Thread-safe tallies of homomorphic additions, multiplications and recrypts."""

    __slots__ = ("additions", "multiplications", "recrypts", "_lock")

    def __init__(self, additions: int = 0, multiplications: int = 0, recrypts: int = 0):
        self.additions = additions
        self.multiplications = multiplications
        self.recrypts = recrypts
        self._lock = threading.Lock()

    def bump(self, additions: int = 0, multiplications: int = 0, recrypts: int = 0) -> None:
        with self._lock:
            self.additions += additions
            self.multiplications += multiplications
            self.recrypts += recrypts

    @property
    def total(self) -> int:
        return self.additions + self.multiplications

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.additions, self.multiplications, self.recrypts)

    def to_bytes(self) -> bytes:
        return struct.pack(">QQQ", *self.as_tuple())

    @classmethod
    def from_bytes(cls, data: bytes) -> "OpCounters":
        if len(data) != 24:
            raise ValueError("COUNTERS payload must be 24 bytes")
        return cls(*struct.unpack(">QQQ", data))

    def __eq__(self, other):
        return isinstance(other, OpCounters) and self.as_tuple() == other.as_tuple()

    def __repr__(self):
        a, m, r = self.as_tuple()
        return f"OpCounters(additions={a}, multiplications={m}, recrypts={r})"


class Evaluator:
    """Gate evaluator shared by all circuits.

    ``pk`` supplies the public reduction modulus and, for recrypt-enabled
    evaluation, the squash vector.  With ``bootstrap`` set, operands are
    refreshed whenever the next gate would exhaust the noise budget;
    ``eager_recrypt`` instead refreshes every product, as a fully homomorphic
    evaluation without noise tracking would.
    """

    def __init__(
        self,
        pk: PublicKey | None = None,
        counters: OpCounters | None = None,
        *,
        bootstrap: BootstrapKey | None = None,
        faults: Iterable[str] = (),
        workers: int = 1,
        eager_recrypt: bool = False,
    ):
        self.pk = pk
        self.x0 = pk.x0 if pk is not None else 0
        self.counters = counters if counters is not None else OpCounters()
        self.bootstrap = bootstrap
        self.faults = frozenset(faults)
        unknown = self.faults - set(FAULTS)
        if unknown:
            raise ValueError(f"unknown faults: {sorted(unknown)}")
        self.workers = workers
        self.limit = pk.params.noise_limit if pk is not None else None
        self._refresh_floor = None
        self.eager_recrypt = eager_recrypt
        if eager_recrypt and bootstrap is None:
            raise ValueError("eager recrypt needs a bootstrap key")
        if bootstrap is not None:
            if pk is None or not pk.y:
                raise ValueError("recrypt-enabled evaluation needs a full public key")
            self._refresh_floor = recrypt_noise_bound(pk.params)

    # -- gates -----------------------------------------------------------

    def _reduce(self, c: int) -> int:
        if self.x0 and c >= self.x0:
            c %= self.x0
        return c

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        if self._refresh_floor is not None and max(a.noise_bits, b.noise_bits) + 1 >= self.limit:
            a, b = self._refresh(a), self._refresh(b)
        self.counters.bump(additions=1)
        return Ciphertext(self._reduce(a.c + b.c), max(a.noise_bits, b.noise_bits) + 1)

    def mul(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        if self._refresh_floor is not None and a.noise_bits + b.noise_bits >= self.limit:
            # refresh the noisier operand first; often that alone suffices
            if a.noise_bits < b.noise_bits:
                a, b = b, a
            a = self._refresh(a)
            if a.noise_bits + b.noise_bits >= self.limit:
                b = self._refresh(b)
        self.counters.bump(multiplications=1)
        out = Ciphertext(self._reduce(a.c * b.c), a.noise_bits + b.noise_bits)
        if self.eager_recrypt:
            self.counters.bump(recrypts=1)
            out = recrypt(out, self.bootstrap, self.pk)
        return out

    def not_(self, a: Ciphertext) -> Ciphertext:
        return self.add(a, trivial(1))

    def _refresh(self, a: Ciphertext) -> Ciphertext:
        if a.noise_bits <= self._refresh_floor:
            return a
        self.counters.bump(recrypts=1)
        return recrypt(a, self.bootstrap, self.pk)

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` per row; results are schedule-independent."""
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    # -- small building blocks ------------------------------------------

    def product(self, factors: Sequence[Ciphertext]) -> Ciphertext:
        if not factors:
            return trivial(1)
        acc = factors[0]
        for f in factors[1:]:
            acc = self.mul(acc, f)
        return acc

    def xor_all(self, terms: Sequence[Ciphertext]) -> Ciphertext:
        """Balanced XOR tree; keeps the noise growth logarithmic in ``len(terms)``."""
        if not terms:
            return trivial(0)
        layer = list(terms)
        while len(layer) > 1:
            nxt = [self.add(layer[i], layer[i + 1]) for i in range(0, len(layer) - 1, 2)]
            if len(layer) % 2:
                nxt.append(layer[-1])
            layer = nxt
        return layer[0]

    def bit_eq(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        t = self.add(a, b)
        return t if "eq_drop_one" in self.faults else self.not_(t)


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class MatchIndexVector:
    indices: tuple[Ciphertext, ...]

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class EncryptedCounter:
    bits: EncryptedWord

    @property
    def width(self) -> int:
        return self.bits.width

    @classmethod
    def zero(cls, width: int) -> "EncryptedCounter":
        return cls(EncryptedWord(tuple(trivial(0) for _ in range(width))))


@dataclass(frozen=True)
class EncryptedPattern:
    """Pattern operand covering every character of the column.

    ``mask[k]`` is True where character ``k`` must equal the literal and
    False for ``?`` positions and, with ``prefix_only``, the tail after a
    final ``*``.
    """

    literal_bits: EncryptedWord
    mask: tuple[bool, ...]
    prefix_only: bool = False


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str  # eq | lt | gt | pattern
    operand: EncryptedWord | EncryptedPattern

    def __post_init__(self):
        if self.op not in ("eq", "lt", "gt", "pattern"):
            raise ValueError(f"unknown predicate operator {self.op!r}")
        if (self.op == "pattern") != isinstance(self.operand, EncryptedPattern):
            raise ValueError("pattern operator needs an EncryptedPattern operand")


@dataclass(frozen=True)
class BitPlaneSum:
    """Per-bit-plane match counts of a uint column: sum = sum_j 2**j * planes[j]."""

    planes: tuple[EncryptedCounter, ...]


# ------------------------------------------------------- index primitives


def eq_bits(a: Sequence[Ciphertext], b: Sequence[Ciphertext], ev: Evaluator) -> Ciphertext:
    if len(a) != len(b):
        raise WidthMismatch(f"cannot compare {len(a)}-bit and {len(b)}-bit words")
    return ev.product([ev.bit_eq(x, y) for x, y in zip(a, b)])


def eq_index(row_word: EncryptedWord, v: EncryptedWord, ev: Evaluator) -> Ciphertext:
    """``prod_i (1 xor c_i xor v_i)``: 1 iff the two words are equal."""
    return eq_bits(row_word.bits, v.bits, ev)


def lt_bits(a: Sequence[Ciphertext], b: Sequence[Ciphertext], ev: Evaluator) -> Ciphertext:
    """1 iff a < b, both LSB first.

    ``sum_i (1 xor a_i) b_i prod_{j>i} (1 xor a_j xor b_j)``; at most one
    term is 1, so the XOR of the terms equals their integer sum.
    """
    if len(a) != len(b):
        raise WidthMismatch(f"cannot compare {len(a)}-bit and {len(b)}-bit words")
    terms = []
    prefix_eq = None  # equality of all bits above position i
    for i in reversed(range(len(a))):
        na = a[i] if "lt_drop_negation" in ev.faults else ev.not_(a[i])
        term = ev.mul(na, b[i])
        if prefix_eq is not None:
            term = ev.mul(term, prefix_eq)
        terms.append(term)
        if i:
            e = ev.bit_eq(a[i], b[i])
            prefix_eq = e if prefix_eq is None else ev.mul(prefix_eq, e)
    return ev.xor_all(terms)


def significance_order(word: EncryptedWord, kind: str) -> list[Ciphertext]:
    """Bits LSB first by numeric significance; strings compare byte-wise big-endian."""
    if kind != "string":
        return list(word.bits)
    chars = word.width // 8
    return [word.bits[8 * k + b] for k in reversed(range(chars)) for b in range(8)]


def lt_index(
    row_word: EncryptedWord, v: EncryptedWord, ev: Evaluator, kind: str = "uint"
) -> Ciphertext:
    return lt_bits(significance_order(row_word, kind), significance_order(v, kind), ev)


def gt_index(
    row_word: EncryptedWord, v: EncryptedWord, ev: Evaluator, kind: str = "uint"
) -> Ciphertext:
    return lt_bits(significance_order(v, kind), significance_order(row_word, kind), ev)


def pattern_index(row_word: EncryptedWord, pat: EncryptedPattern, ev: Evaluator) -> Ciphertext:
    chars = row_word.width // 8
    if len(pat.mask) > chars or pat.literal_bits.width != row_word.width:
        raise PatternTooLong(
            f"pattern covers {len(pat.mask)} characters, column holds {chars}"
        )
    factors = []
    for k in range(chars):
        literal = pat.mask[k] if k < len(pat.mask) else not pat.prefix_only
        if not literal and "pattern_ignore_mask" not in ev.faults:
            continue
        for b in range(8):
            factors.append(ev.bit_eq(row_word.bits[8 * k + b], pat.literal_bits.bits[8 * k + b]))
    return ev.product(factors)


def predicate_index(
    row: EncryptedRecord, pred: Predicate, schema: TableSchema, ev: Evaluator
) -> Ciphertext:
    col = schema.column(pred.column)
    word = row.words[schema.index(pred.column)]
    if pred.op == "pattern":
        if col.kind != "string":
            raise SchemaMismatch("patterns apply to string columns only")
        return pattern_index(word, pred.operand, ev)
    if pred.operand.width != col.bit_width:
        raise WidthMismatch(
            f"operand has {pred.operand.width} bits, column {col.name} has {col.bit_width}"
        )
    if pred.op == "eq":
        return eq_index(word, pred.operand, ev)
    if pred.op == "lt":
        return lt_index(word, pred.operand, ev, col.kind)
    return gt_index(word, pred.operand, ev, col.kind)


def match_indices(t: EncryptedTable, pred: Predicate, ev: Evaluator) -> MatchIndexVector:
    """``I_R`` for every row (rows evaluated independently)."""
    _check_predicate(t.schema, pred)
    return MatchIndexVector(
        tuple(ev.map(lambda row: predicate_index(row, pred, t.schema, ev), t.rows))
    )


def _check_predicate(schema: TableSchema, pred: Predicate) -> None:
    try:
        schema.column(pred.column)
    except KeyError:
        raise SchemaMismatch(f"no column {pred.column!r} in {schema.table_name}") from None


# ---------------------------------------------------------------- counters


def encrypted_add(acc: EncryptedCounter, bit: Ciphertext, ev: Evaluator) -> EncryptedCounter:
    """Ripple-carry increment by one encrypted bit; overflow past the width is dropped."""
    out = []
    carry = bit
    w = acc.width
    for j, a in enumerate(acc.bits.bits):
        out.append(ev.add(a, carry))
        if j + 1 < w:
            carry = ev.add(a, carry) if "increment_carry_xor" in ev.faults else ev.mul(a, carry)
    return EncryptedCounter(EncryptedWord(tuple(out)))


def running_count(bits: Sequence[Ciphertext], width: int, ev: Evaluator) -> EncryptedCounter:
    acc = EncryptedCounter.zero(width)
    for b in bits:
        acc = encrypted_add(acc, b, ev)
    return acc


def prefix_sums(
    idx: MatchIndexVector, ev: Evaluator, strategy: str = "chain"
) -> list[EncryptedCounter]:
    """Inclusive prefix sums ``S_R = sum_{i <= R} I_i`` at width ceil(log2(rows+1)).

    ``chain`` (default) reuses ``S_{R-1}``, so the cost is linear in the row
    count.  ``per_row`` computes each ``S_R`` as its own sum: quadratic cost,
    but rows are independent and can be evaluated in parallel.  Both decrypt
    identically and carry identical noise bounds.
    """
    if not len(idx):
        raise ValueError("prefix sums need at least one row")
    width = bits_needed(len(idx))
    if strategy == "chain":
        sums, acc = [], EncryptedCounter.zero(width)
        for bit in idx.indices:
            acc = encrypted_add(acc, bit, ev)
            sums.append(acc)
        return sums
    if strategy != "per_row":
        raise ValueError(f"unknown prefix-sum strategy {strategy!r}")
    return ev.map(lambda r: running_count(idx.indices[: r + 1], width, ev), list(range(len(idx))))


def nth_match_index(
    idx: MatchIndexVector,
    sums: Sequence[EncryptedCounter],
    eta: EncryptedCounter,
    ev: Evaluator,
) -> MatchIndexVector:
    """``I'_R = I_R * prod_i (1 xor eta_i xor S_{R,i})``."""
    if len(sums) != len(idx):
        raise WidthMismatch("one prefix sum per row is required")

    def one(r: int) -> Ciphertext:
        s = sums[r]
        if s.width != eta.width:
            raise WidthMismatch(f"eta has {eta.width} bits, prefix sums have {s.width}")
        hit = eq_bits(eta.bits.bits, s.bits.bits, ev)
        if "nth_skip_index" in ev.faults:
            return hit
        return ev.mul(idx.indices[r], hit)

    return MatchIndexVector(tuple(ev.map(one, list(range(len(idx))))))


def pad_counter(ctr: EncryptedCounter, width: int) -> EncryptedCounter:
    """Zero-extend with trivial zeros (used to align eta and prefix-sum widths)."""
    if ctr.width >= width:
        return ctr
    extra = tuple(trivial(0) for _ in range(width - ctr.width))
    return EncryptedCounter(EncryptedWord(ctr.bits.bits + extra))


# ------------------------------------------------------------- statements


def _zero_record(schema: TableSchema) -> EncryptedRecord:
    return EncryptedRecord(
        tuple(EncryptedWord(tuple(trivial(0) for _ in range(c.bit_width))) for c in schema.columns)
    )


def _rebuild(schema: TableSchema, flat: Sequence[Ciphertext]) -> EncryptedRecord:
    words, pos = [], 0
    for c in schema.columns:
        words.append(EncryptedWord(tuple(flat[pos : pos + c.bit_width])))
        pos += c.bit_width
    return EncryptedRecord(tuple(words))


def select_nth(
    t: EncryptedTable,
    pred: Predicate,
    eta: EncryptedCounter,
    ev: Evaluator,
    *,
    prefix_strategy: str = "chain",
) -> EncryptedRecord:
    """The n-th matching record (1-based, storage order), or all zeros."""
    _check_predicate(t.schema, pred)
    if not t.rows:
        return _zero_record(t.schema)
    idx = match_indices(t, pred, ev)
    sums = prefix_sums(idx, ev, prefix_strategy)
    width = max(eta.width, sums[0].width)
    sums = [pad_counter(s, width) for s in sums]
    chosen = nth_match_index(idx, sums, pad_counter(eta, width), ev)
    if "select_mask_with_match" in ev.faults:
        chosen = idx

    def masked(r: int) -> list[Ciphertext]:
        sel = chosen.indices[r]
        return [ev.mul(sel, b) for b in t.rows[r].flat()]

    rows = ev.map(masked, list(range(len(t.rows))))
    flat = [ev.xor_all([row[k] for row in rows]) for k in range(t.schema.record_bits)]
    return _rebuild(t.schema, flat)


def update_where(
    t: EncryptedTable, pred: Predicate, u: EncryptedRecord, ev: Evaluator
) -> EncryptedTable:
    """``R' = (not I_R) * R + I_R * U`` for every row."""
    if not u.conforms(t.schema):
        raise SchemaMismatch("update record does not match the table schema")
    idx = match_indices(t, pred, ev)
    new_bits = u.flat()

    def one(r: int) -> EncryptedRecord:
        i = idx.indices[r]
        keep = i if "update_keep_with_match" in ev.faults else ev.not_(i)
        flat = [
            ev.add(ev.mul(keep, old), ev.mul(i, new))
            for old, new in zip(t.rows[r].flat(), new_bits)
        ]
        return _rebuild(t.schema, flat)

    return EncryptedTable(t.schema, tuple(ev.map(one, list(range(len(t.rows))))))


def delete_where(t: EncryptedTable, pred: Predicate, ev: Evaluator) -> EncryptedTable:
    """``R' = (not I_R) * R``: matching rows become all zeros, row count unchanged."""
    idx = match_indices(t, pred, ev)

    def one(r: int) -> EncryptedRecord:
        i = idx.indices[r]
        keep = i if "delete_keep_with_match" in ev.faults else ev.not_(i)
        return _rebuild(t.schema, [ev.mul(keep, b) for b in t.rows[r].flat()])

    return EncryptedTable(t.schema, tuple(ev.map(one, list(range(len(t.rows))))))


def count_where(t: EncryptedTable, pred: Predicate, ev: Evaluator) -> EncryptedCounter:
    """Number of matching rows, i.e. the last inclusive prefix sum."""
    width = bits_needed(len(t.rows))
    if not t.rows:
        _check_predicate(t.schema, pred)
        return EncryptedCounter.zero(width)
    idx = match_indices(t, pred, ev)
    return running_count(idx.indices, width, ev)


def sum_where(
    t: EncryptedTable, pred: Predicate, target_col: str, ev: Evaluator
) -> BitPlaneSum:
    """Sum of ``target_col`` over matching rows, returned as bit-plane counts.

    Plane ``j`` counts the matching rows whose value has bit ``j`` set, so
    the client recovers ``sum_j 2**j * plane_j`` after decryption.  Each
    plane is a ripple-carry running count of ``I_R * x_{R,j}``; combining the
    planes homomorphically would double the noise bound per output bit.
    """
    try:
        col = t.schema.column(target_col)
    except KeyError:
        raise SchemaMismatch(f"no column {target_col!r} in {t.schema.table_name}") from None
    if col.kind != "uint":
        raise SchemaMismatch("AVG/SUM target must be an unsigned column")
    width = bits_needed(len(t.rows))
    if not t.rows:
        _check_predicate(t.schema, pred)
        return BitPlaneSum(tuple(EncryptedCounter.zero(width) for _ in range(col.bit_width)))
    idx = match_indices(t, pred, ev)
    ci = t.schema.index(target_col)
    masked = ev.map(
        lambda r: [ev.mul(idx.indices[r], b) for b in t.rows[r].words[ci].bits],
        list(range(len(t.rows))),
    )
    planes = ev.map(
        lambda j: running_count([m[j] for m in masked], width, ev), list(range(col.bit_width))
    )
    return BitPlaneSum(tuple(planes))


def combine_planes(plane_counts: Sequence[int]) -> int:
    return sum(c << j for j, c in enumerate(plane_counts))


# ------------------------------------------------------------ arithmetic


def full_add(a: Ciphertext, b: Ciphertext, cin: Ciphertext, ev: Evaluator):
    t = ev.add(a, b)
    s = ev.add(t, cin)
    carry = ev.add(ev.mul(a, b), ev.mul(cin, t))
    return s, carry


def ripple_add(
    a: Sequence[Ciphertext], b: Sequence[Ciphertext], ev: Evaluator
) -> list[Ciphertext]:
    """Sum of two LSB-first words; the result is one bit wider than the longer input."""
    n = max(len(a), len(b))
    a = list(a) + [trivial(0)] * (n - len(a))
    b = list(b) + [trivial(0)] * (n - len(b))
    out = []
    carry = None
    for x, y in zip(a, b):
        if carry is None:
            out.append(ev.add(x, y))
            carry = ev.mul(x, y)
        else:
            s, carry = full_add(x, y, carry, ev)
            out.append(s)
    out.append(carry)
    return out


def multiply_words(
    a: Sequence[Ciphertext], b: Sequence[Ciphertext], ev: Evaluator
) -> list[Ciphertext]:
    """Schoolbook product of two encrypted unsigned integers (2n-bit result)."""
    n = len(a)
    acc = [ev.mul(x, b[0]) for x in a]
    result = []
    for i in range(1, len(b)):
        result.append(acc[0])
        partial = [ev.mul(x, b[i]) for x in a]
        acc = ripple_add(acc[1:], partial, ev)
    result.extend(acc)
    width = n + len(b)
    return (result + [trivial(0)] * width)[:width]


def check_decryptable(bits: Iterable[Ciphertext], limit: int) -> None:
    worst = max((b.noise_bits for b in bits), default=0)
    if worst >= limit:
        raise NoiseOverflow(f"noise estimate {worst} reaches the limit {limit}")
