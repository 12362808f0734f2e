"""Blind execution service.

The server stores encrypted tables together with each table's public
evaluation context and runs compiled queries over them.  It never sees a
secret key: no message type carries one and :class:`ServerState` refuses
to hold one.
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import socketserver
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .circuits import Evaluator, OpCounters, Predicate, count_where, delete_where, select_nth, sum_where, update_where
from .enc_data import EncryptedTable, parse_table, record_from_flat, serialize_table
from .errors import (
    BootstrapUnavailable,
    DuplicateTable,
    HedbError,
    MalformedFrame,
    PayloadTooLarge,
    SchemaMismatch,
    UnknownTable,
)
from .he_core import BootstrapKey, Ciphertext, PublicKey, SecretKey
from .sql_front import CompiledQuery
from . import wire

log = logging.getLogger("hedb.server")


# --------------------------------------------------------------- execution


def execute(
    t: EncryptedTable, q: CompiledQuery, ev: Evaluator
) -> tuple[list[Ciphertext], EncryptedTable | None]:
    """Run ``q`` over ``t``; returns the result bits and, for mutations, the new table.

    SELECT returns the record bits in schema order, COUNT the counter bits,
    AVG the count bits followed by one counter per bit plane of the target.
    """
    shape, params = q.shape, q.params
    pred = Predicate(shape.column, shape.op, params.operand)
    if shape.kind == "select":
        rec = select_nth(t, pred, params.eta, ev)
        return rec.flat(), None
    if shape.kind == "update":
        return [], update_where(t, pred, params.update, ev)
    if shape.kind == "delete":
        return [], delete_where(t, pred, ev)
    if shape.kind == "count":
        return list(count_where(t, pred, ev).bits.bits), None
    if shape.kind == "avg":
        count = count_where(t, pred, ev)
        sums = sum_where(t, pred, shape.target_col, ev)
        out = list(count.bits.bits)
        for plane in sums.planes:
            out += plane.bits.bits
        return out, None
    raise SchemaMismatch(f"unknown statement kind {shape.kind!r}")


# ------------------------------------------------------------------- state


@dataclass
class TableEntry:
    table: EncryptedTable
    pk: PublicKey
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ServerState:
    """Tables on disk and in memory; holds public material only."""

    __slots__ = ("data_dir", "tables", "bootstrap", "workers", "_lock")

    def __init__(
        self,
        data_dir: str | os.PathLike,
        bootstrap: tuple[PublicKey, BootstrapKey] | None = None,
        workers: int = 1,
    ):
        if bootstrap is not None:
            pk, bk = bootstrap
            if not isinstance(pk, PublicKey) or not isinstance(bk, BootstrapKey):
                raise TypeError("bootstrap must be a (PublicKey, BootstrapKey) pair")
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.tables: dict[str, TableEntry] = {}
        self.bootstrap = bootstrap
        self.workers = workers
        self._lock = threading.Lock()
        self._load()

    def __setattr__(self, name, value):
        if isinstance(value, SecretKey):
            raise TypeError("the server never holds a secret key")
        object.__setattr__(self, name, value)

    def _paths(self, name: str) -> tuple[Path, Path]:
        return self.data_dir / f"{name}.tbl", self.data_dir / f"{name}.ctx"

    def _load(self) -> None:
        for tbl in sorted(self.data_dir.glob("*.tbl")):
            ctx = tbl.with_suffix(".ctx")
            if not ctx.exists():
                log.warning("skipping %s: no context file", tbl.name)
                continue
            table = parse_table(tbl.read_bytes())
            pk, _ = wire.read_public(ctx.read_bytes())
            self.tables[table.schema.table_name] = TableEntry(table, pk)

    def entry(self, name: str) -> TableEntry:
        try:
            return self.tables[name]
        except KeyError:
            raise UnknownTable(f"no table named {name!r}") from None

    def _persist(self, table: EncryptedTable) -> None:
        tbl, _ = self._paths(table.schema.table_name)
        atomic_write(tbl, serialize_table(table))

    # -- handlers --------------------------------------------------------

    def handle_create_table(self, payload: bytes) -> None:
        schema, pk = wire.decode_create_table(payload)
        with self._lock:
            if schema.table_name in self.tables:
                raise DuplicateTable(f"table {schema.table_name!r} already exists")
            table = EncryptedTable(schema, ())
            tbl, ctx = self._paths(schema.table_name)
            atomic_write(ctx, wire.serialize_public(pk))
            atomic_write(tbl, serialize_table(table))
            self.tables[schema.table_name] = TableEntry(table, pk)

    def handle_insert(self, payload: bytes) -> None:
        name, cts = wire.decode_insert(payload)
        e = self.entry(name)
        with e.lock:
            row = record_from_flat(cts, e.table.schema)
            new = e.table.with_row(row)
            self._persist(new)
            e.table = new

    def evaluator(self, e: TableEntry, counters: OpCounters) -> Evaluator:
        bk, pk = None, e.pk
        if self.bootstrap is not None:
            bpk, bk = self.bootstrap
            if bpk.x0 != e.pk.x0:
                raise BootstrapUnavailable("bootstrap key does not belong to this table's key")
            pk = bpk
        return Evaluator(pk, counters, bootstrap=bk, workers=self.workers)

    def handle_query(self, payload: bytes) -> tuple[list[Ciphertext], OpCounters]:
        q = wire.decode_query(payload, lambda name: self.entry(name).table.schema)
        e = self.entry(q.shape.table)
        counters = OpCounters()
        with e.lock:
            result, new = execute(e.table, q, self.evaluator(e, counters))
            if new is not None:
                self._persist(new)
                e.table = new
        return result, counters


# ------------------------------------------------------------------ socket


class _Handler(socketserver.StreamRequestHandler):
    server: "HedbServer"

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        self.wfile.write(wire.encode_frame(msg_type, payload))
        self.wfile.flush()

    def handle(self) -> None:
        state = self.server.state
        while True:
            try:
                frame = wire.read_frame(self.rfile, self.server.max_payload)
            except (MalformedFrame, PayloadTooLarge) as exc:
                self.send(wire.MsgType.ERROR, wire.encode_error(exc))
                return
            except OSError:
                return
            if frame is None:
                return
            mtype, payload = frame
            try:
                if mtype == wire.MsgType.PING:
                    self.send(wire.MsgType.PING, payload)
                elif mtype == wire.MsgType.CREATE_TABLE:
                    state.handle_create_table(payload)
                    self.send(wire.MsgType.RESULT, wire.encode_result([]))
                elif mtype == wire.MsgType.INSERT_ROW:
                    state.handle_insert(payload)
                    self.send(wire.MsgType.RESULT, wire.encode_result([]))
                elif mtype == wire.MsgType.QUERY:
                    result, counters = state.handle_query(payload)
                    self.send(wire.MsgType.RESULT, wire.encode_result(result))
                    self.send(wire.MsgType.COUNTERS, counters.to_bytes())
                else:
                    self.send(wire.MsgType.ERROR, wire.encode_error("UnknownMessage", mtype.name))
            except HedbError as exc:
                self.send(wire.MsgType.ERROR, wire.encode_error(exc))
            except Exception as exc:  # keep serving other requests
                log.exception("unexpected failure")
                self.send(wire.MsgType.ERROR, wire.encode_error("Error", repr(exc)))


class HedbServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, state: ServerState, max_payload: int = wire.DEFAULT_MAX_PAYLOAD):
        self.state = state
        self.max_payload = max_payload
        super().__init__(address, _Handler)


def serve(
    port: int,
    data_dir: str | os.PathLike,
    *,
    host: str = "127.0.0.1",
    max_payload: int = wire.DEFAULT_MAX_PAYLOAD,
    bootstrap: tuple[PublicKey, BootstrapKey] | None = None,
    workers: int = 1,
) -> HedbServer:
    """Bind and return a server; call ``serve_forever`` to run it."""
    state = ServerState(data_dir, bootstrap=bootstrap, workers=workers)
    return HedbServer((host, port), state, max_payload)


def _interrupt(signum, frame):
    raise KeyboardInterrupt


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="hedb-server", description="Blind query server.")
    ap.add_argument("--port", type=int, required=True)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--enable-recrypt", action="store_true",
                    help="refresh noisy ciphertexts with a bootstrap key")
    ap.add_argument("--bootstrap-key", help="bootstrap key file (needs --enable-recrypt)")
    ap.add_argument("--max-payload", type=int, default=wire.DEFAULT_MAX_PAYLOAD)
    ap.add_argument("--workers", type=int, default=1, help="threads per query for row-level work")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    bootstrap = None
    if args.enable_recrypt:
        if not args.bootstrap_key:
            ap.error("--enable-recrypt needs --bootstrap-key")
        bootstrap = wire.parse_bootstrap(Path(args.bootstrap_key).read_bytes())
    srv = serve(args.port, args.data_dir, host=args.host, max_payload=args.max_payload,
                bootstrap=bootstrap, workers=args.workers)
    host, port = srv.server_address[:2]
    print(f"hedb-server listening on {host}:{port}", flush=True)
    signal.signal(signal.SIGTERM, _interrupt)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        # every mutation is already durable; only the socket needs closing
        srv.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
