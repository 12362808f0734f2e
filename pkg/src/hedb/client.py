"""Trusted-side client: key management, encryption, query submission, decryption.

Schemas of the tables a client created are kept in a registry directory next
to the key file (``<key>.schemas/<table>.schema``) so later commands can
encode rows and validate queries without asking the server.
"""
from __future__ import annotations

import argparse
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

from .circuits import OpCounters, combine_planes
from .enc_data import ColumnSpec, TableSchema, Value, encode_record, value_from_bits
from .errors import HedbError, KeyFormatError, NoiseOverflow, QuerySyntaxError, UnknownTable
from .he_core import (
    PublicKey,
    SecretKey,
    SecurityParams,
    decrypt_bit,
    dump_key,
    keygen,
    load_key,
)
from .sql_front import QueryAst, compile_query, parse, render, validate
from . import wire

DEFAULT_SERVER = "127.0.0.1:7878"
DEFAULT_KEY = "hedb.key"
NO_MATCH = "(no match)"


def env_seed() -> int | None:
    """``HEDB_SEED`` fixes all client-side randomness when set."""
    raw = os.environ.get("HEDB_SEED")
    return int(raw) if raw not in (None, "") else None


@dataclass
class ClientConfig:
    server: str = DEFAULT_SERVER
    key_path: Path = Path(DEFAULT_KEY)
    lam: int = 2
    default_table: str | None = None

    @property
    def registry(self) -> Path:
        return self.key_path.with_name(self.key_path.name + ".schemas")


@dataclass
class QueryResult:
    kind: str
    schema: TableSchema
    record: tuple[Value, ...] | None = None
    count: int | None = None
    total: int | None = None
    target_col: str = ""
    counters: OpCounters = field(default_factory=OpCounters)

    @property
    def no_match(self) -> bool:
        if self.kind == "select":
            return all(v == c.zero() for v, c in zip(self.record, self.schema.columns))
        if self.kind == "avg":
            return self.count == 0
        return False

    @property
    def average(self) -> float | None:
        if self.kind != "avg" or not self.count:
            return None
        return self.total / self.count


# ---------------------------------------------------------------- keys/io


def write_key(path: Path, sk: SecretKey, pk: PublicKey) -> None:
    path = Path(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(dump_key(sk, pk))
    try:
        os.chmod(path, 0o600)
    except OSError:
        pass


def read_key(path: Path) -> tuple[SecretKey, PublicKey]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise KeyFormatError(f"key file {path} not found; run `hedb keygen` first") from None
    return load_key(text)


def cmd_keygen(
    lam: int,
    out: Path,
    seed: int | None = None,
    *,
    profile: str = "database",
    bootstrap_out: Path | None = None,
) -> tuple[SecretKey, PublicKey]:
    if lam < 2:
        raise ValueError("lambda must be at least 2")
    params = SecurityParams.database(lam) if profile == "database" else SecurityParams.bootstrappable(lam)
    sk, pk, bk = keygen(params, seed)
    write_key(out, sk, pk)
    if bootstrap_out is not None:
        Path(bootstrap_out).write_bytes(wire.serialize_bootstrap(pk, bk))
    return sk, pk


# ------------------------------------------------------------------ client


class Client:
    """Library form of the CLI; one connection, one request in flight."""

    def __init__(self, config: ClientConfig, seed: int | random.Random | None = None):
        self.config = config
        self.sk, self.pk = read_key(config.key_path)
        if seed is None:
            seed = env_seed()
        self.rng = seed if isinstance(seed, random.Random) else (
            random.SystemRandom() if seed is None else random.Random(seed)
        )
        self._conn: wire.Connection | None = None
        self.last_counters = OpCounters()

    @property
    def conn(self) -> wire.Connection:
        if self._conn is None:
            self._conn = wire.Connection.from_address(self.config.server)
        return self._conn

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- schema registry -------------------------------------------------

    def schema(self, table: str) -> TableSchema:
        path = self.config.registry / f"{table}.schema"
        if not path.exists():
            raise UnknownTable(f"no local schema for table {table!r}; create it with this key first")
        return TableSchema.from_text(table, path.read_text())

    def register(self, schema: TableSchema) -> None:
        self.config.registry.mkdir(parents=True, exist_ok=True)
        (self.config.registry / f"{schema.table_name}.schema").write_text(schema.to_text())

    # -- commands ----------------------------------------------------------

    def ping(self) -> bool:
        mtype, _ = self.conn.request(wire.MsgType.PING, b"ping")
        return mtype == wire.MsgType.PING

    def create_table(self, schema: TableSchema) -> None:
        self.conn.request(wire.MsgType.CREATE_TABLE, wire.encode_create_table(schema, self.pk))
        self.register(schema)

    def insert(self, table: str, values: Sequence[Value]) -> None:
        schema = self.schema(table)
        row = encode_record(values, schema, self.sk, self.rng)
        self.conn.request(wire.MsgType.INSERT_ROW, wire.encode_insert(table, row))

    def query(self, sql: str, n: int | None = None) -> QueryResult:
        ast = parse(sql)
        schema = self.schema(ast.table)
        checked = validate(ast, schema)
        q = compile_query(checked, self.sk, n, self.rng)
        cts, counters = self.conn.query(q)
        self.last_counters = counters
        bits = [decrypt_bit(ct, self.sk) for ct in cts]
        res = QueryResult(ast.kind, schema, counters=counters)
        if ast.kind == "select":
            rec, pos = [], 0
            for c in schema.columns:
                rec.append(value_from_bits(bits[pos : pos + c.bit_width], c))
                pos += c.bit_width
            res.record = tuple(rec)
        elif ast.kind == "count":
            res.count = value_from_bits(bits, ColumnSpec("count", "uint", len(bits)))
        elif ast.kind == "avg":
            target = schema.column(ast.target_col)
            w = len(bits) // (1 + target.bit_width)
            res.count = sum(b << i for i, b in enumerate(bits[:w]))
            planes = [
                sum(b << i for i, b in enumerate(bits[w * (1 + j) : w * (2 + j)]))
                for j in range(target.bit_width)
            ]
            res.total = combine_planes(planes)
            res.target_col = ast.target_col
        return res


# -------------------------------------------------------------- rendering


def _table_text(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    cells = [[str(h) for h in headers]] + [[str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    line = lambda r: " | ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    out = [line(cells[0]), "-+-".join("-" * w for w in widths)]
    out += [line(r) for r in cells[1:]]
    return "\n".join(out)


def render_result(res: QueryResult) -> str:
    if res.kind == "select":
        if res.no_match:
            return NO_MATCH
        return _table_text([c.name for c in res.schema.columns], [res.record])
    if res.kind == "count":
        return _table_text(["COUNT(*)"], [[res.count]])
    if res.kind == "avg":
        if res.no_match:
            return NO_MATCH
        return _table_text([f"AVG({res.target_col})"], [[f"{res.average:.2f}"]])
    return f"{res.kind.upper()} executed"


def render_counters(c: OpCounters) -> str:
    return f"additions={c.additions} multiplications={c.multiplications} recrypts={c.recrypts}"


def describe_error(exc: Exception) -> str:
    if isinstance(exc, NoiseOverflow):
        return (f"error: {exc}\nhint: the result is too noisy to decrypt; "
                "generate a key with a larger lambda or query a smaller table")
    code = getattr(exc, "code", type(exc).__name__)
    return f"error [{code}]: {exc}"


def parse_values(schema: TableSchema, raw: Sequence[str]) -> list[Value]:
    if len(raw) != len(schema.columns):
        raise HedbError(f"{schema.table_name} has {len(schema.columns)} columns, got {len(raw)} values")
    out: list[Value] = []
    for text, c in zip(raw, schema.columns):
        if c.kind == "uint":
            try:
                out.append(int(text))
            except ValueError:
                raise HedbError(f"column {c.name} expects an unsigned integer, got {text!r}") from None
        else:
            out.append(text)
    return out


# ------------------------------------------------------------------- shell


class Shell:
    """Line-oriented query loop; errors are reported and the loop continues."""

    PROMPT = "hedb> "
    HELP = "statements: SQL subset | \\next | \\count | \\ops | \\help | \\quit"

    def __init__(self, client: Client, out: TextIO = sys.stdout):
        self.client = client
        self.out = out
        self.last_select: str | None = None
        self.last_n = 1

    def say(self, text: str) -> None:
        print(text, file=self.out, flush=True)

    def run_sql(self, sql: str, n: int | None = None) -> None:
        res = self.client.query(sql, n)
        if res.kind == "select":
            self.last_select, self.last_n = sql, n or 1
        self.say(render_result(res))

    def handle(self, line: str) -> bool:
        """Process one line; returns False when the shell should exit."""
        line = line.strip()
        if not line:
            return True
        try:
            if line in ("\\quit", "\\q"):
                return False
            if line == "\\help":
                self.say(self.HELP)
            elif line == "\\ops":
                self.say(render_counters(self.client.last_counters))
            elif line == "\\next":
                if self.last_select is None:
                    self.say("error: no previous SELECT")
                else:
                    self.run_sql(self.last_select, self.last_n + 1)
            elif line == "\\count":
                if self.last_select is None:
                    self.say("error: no previous SELECT")
                else:
                    ast = parse(self.last_select)
                    self.run_sql(render(QueryAst("count", ast.table, ast.predicate)))
            elif line.startswith("\\"):
                self.say(f"error: unknown command {line.split()[0]}")
            else:
                self.run_sql(line)
        except (HedbError, OSError) as exc:
            self.say(describe_error(exc))
        return True

    def loop(self, stdin: TextIO = sys.stdin, interactive: bool | None = None) -> None:
        if interactive is None:
            interactive = stdin.isatty()
        while True:
            if interactive:
                print(self.PROMPT, end="", file=self.out, flush=True)
            line = stdin.readline()
            if not line:
                break
            if not self.handle(line):
                break


# --------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hedb", description="Client for the encrypted database.")
    ap.add_argument("--server", default=os.environ.get("HEDB_SERVER", DEFAULT_SERVER),
                    help="host:port of hedb-server")
    ap.add_argument("--key", default=os.environ.get("HEDB_KEY", DEFAULT_KEY), help="key file")
    sub = ap.add_subparsers(dest="cmd", required=True)

    k = sub.add_parser("keygen", help="generate a key file")
    k.add_argument("--lambda", dest="lam", type=int, default=2)
    k.add_argument("--out", help="key file to write (defaults to --key)")
    k.add_argument("--profile", choices=("database", "bootstrappable"), default="database")
    k.add_argument("--bootstrap-out", help="also write a bootstrap key for hedb-server")

    c = sub.add_parser("create-table", help="create a table from a schema file")
    c.add_argument("--schema", required=True, help="name:kind:bits per line")
    c.add_argument("--table", help="table name (defaults to the schema file stem)")

    i = sub.add_parser("insert", help="encrypt and insert one row")
    i.add_argument("table")
    i.add_argument("values", nargs="+")

    q = sub.add_parser("query", help="run one statement")
    q.add_argument("sql")
    q.add_argument("--n", type=int, default=None, help="which match a SELECT returns")
    q.add_argument("--ops", action="store_true", help="also print the operation counters")

    sub.add_parser("shell", help="interactive query shell")
    sub.add_parser("ping", help="check that the server answers")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    key = Path(args.out if args.cmd == "keygen" and args.out else args.key)
    config = ClientConfig(server=args.server, key_path=key)
    try:
        if args.cmd == "keygen":
            boot = Path(args.bootstrap_out) if args.bootstrap_out else None
            sk, _ = cmd_keygen(args.lam, key, env_seed(), profile=args.profile, bootstrap_out=boot)
            print(f"wrote {key} (lambda={args.lam}, p_bits={sk.params.p_bits})")
            return 0
        # parse before connecting so syntax errors cost no network traffic
        if args.cmd == "query":
            parse(args.sql)
        with Client(config) as client:
            if args.cmd == "create-table":
                path = Path(args.schema)
                schema = TableSchema.from_text(args.table or path.stem, path.read_text())
                client.create_table(schema)
                print(f"created {schema.table_name} ({len(schema.columns)} columns, {schema.record_bits} bits/row)")
            elif args.cmd == "insert":
                values = parse_values(client.schema(args.table), args.values)
                client.insert(args.table, values)
                print("inserted 1 row")
            elif args.cmd == "query":
                res = client.query(args.sql, args.n)
                print(render_result(res))
                if args.ops:
                    print(render_counters(res.counters))
            elif args.cmd == "ping":
                client.ping()
                print("pong")
            elif args.cmd == "shell":
                Shell(client).loop()
    except QuerySyntaxError as exc:
        print(describe_error(exc), file=sys.stderr)
        return 2
    except (HedbError, OSError, ValueError) as exc:
        print(describe_error(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
