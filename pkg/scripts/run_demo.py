#!/usr/bin/env python3
"""Loopback demo: start a server, load the patients table, run a few queries.

Everything runs in one process (the server on a background thread), so the
only artifacts are a key file and a data directory under ``--workdir``.
"""
from __future__ import annotations

import argparse
import csv
import threading
from dataclasses import dataclass
from pathlib import Path

from hedb.client import Client, ClientConfig, cmd_keygen, render_counters, render_result
from hedb.enc_data import TableSchema
from hedb.server import serve
from hedb.wire import parse_bootstrap

HERE = Path(__file__).resolve().parent

QUERIES = (
    "SELECT * FROM patients WHERE name = 'Carol'",
    "SELECT * FROM patients WHERE name = 'Nobody'",
    "SELECT * FROM patients WHERE age > 50",
    "SELECT * FROM patients WHERE name = 'G*'",
    "SELECT COUNT(*) FROM patients WHERE ward = 1",
    "SELECT AVG(age) FROM patients WHERE ward = 2",
    "UPDATE patients SET name = 'Bobby', age = 52, ward = 4 WHERE name = 'Bob'",
    "DELETE FROM patients WHERE age < 25",
    "SELECT COUNT(*) FROM patients WHERE ward = 4",
)


@dataclass
class DemoConfig:
    workdir: Path = Path("demo_run")
    schema: Path = HERE / "patients.schema"
    rows: Path = HERE / "patients.csv"
    lam: int = 2
    seed: int = 0
    # the database profile cannot query a table after UPDATE/DELETE without
    # refreshing; recrypt mode uses the bootstrappable profile instead
    recrypt: bool = True


def load_rows(path: Path, schema: TableSchema) -> list[tuple]:
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            tuple(int(r[c.name]) if c.kind == "uint" else r[c.name] for c in schema.columns)
            for r in reader
        ]


def run(cfg: DemoConfig) -> None:
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    key = cfg.workdir / "demo.key"
    boot = cfg.workdir / "demo.boot"
    profile = "bootstrappable" if cfg.recrypt else "database"
    cmd_keygen(cfg.lam, key, cfg.seed, profile=profile, bootstrap_out=boot if cfg.recrypt else None)
    bootstrap = parse_bootstrap(boot.read_bytes()) if cfg.recrypt else None

    schema = TableSchema.from_text("patients", cfg.schema.read_text())
    srv = serve(0, cfg.workdir / "data", bootstrap=bootstrap)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    host, port = srv.server_address[:2]
    try:
        with Client(ClientConfig(server=f"{host}:{port}", key_path=key), seed=cfg.seed) as client:
            if "patients" not in srv.state.tables:
                client.create_table(schema)
                for row in load_rows(cfg.rows, schema):
                    client.insert("patients", row)
            else:
                client.register(schema)
            for sql in QUERIES:
                res = client.query(sql)
                print(f"hedb> {sql}\n{render_result(res)}\n  [{render_counters(res.counters)}]\n")
    finally:
        srv.shutdown()
        srv.server_close()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, default=DemoConfig.workdir)
    ap.add_argument("--lambda", dest="lam", type=int, default=DemoConfig.lam)
    ap.add_argument("--seed", type=int, default=DemoConfig.seed)
    ap.add_argument("--no-recrypt", dest="recrypt", action="store_false")
    args = ap.parse_args()
    run(DemoConfig(workdir=args.workdir, lam=args.lam, seed=args.seed, recrypt=args.recrypt))


if __name__ == "__main__":
    main()
