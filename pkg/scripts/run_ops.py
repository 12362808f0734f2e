#!/usr/bin/env python3
"""Operation counts per statement for several schemas, plus the closed-form check."""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

from hedb.enc_data import TableSchema
from hedb.harness import bench_ops, predicted_eq_ops, select_update_crossover, time_recrypt

HERE = Path(__file__).resolve().parent


@dataclass
class OpsConfig:
    rows: int = 10
    seed: int = 0
    out: Path = Path("results")
    schemas: dict = field(default_factory=lambda: {
        "uint3x8": "a:uint:8\nb:uint:8\nc:uint:8\n",
        "uint3x4": "a:uint:4\nb:uint:4\nc:uint:4\n",
        "patients": (HERE / "patients.schema").read_text(),
    })


def run(cfg: OpsConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    recrypt_s = time_recrypt(2, cfg.seed)
    for name, text in cfg.schemas.items():
        schema = TableSchema.from_text(name, text)
        report = bench_ops(schema, cfg.rows, cfg.seed)
        report.recrypt_seconds[2] = recrypt_s
        print(report.ops_text())
        w = schema.columns[0].bit_width
        for row in report.op_rows:
            if row.statement in ("SELECT", "UPDATE", "DELETE"):
                pred = predicted_eq_ops(row.statement.lower(), schema.record_bits, cfg.rows, w)
                status = "ok" if pred == (row.additions, row.multiplications) else "MISMATCH"
                print(f"  closed form {row.statement}: {pred} {status}")
        per_row = select_update_crossover(cfg.rows, w, strategy="per_row")
        print(f"  crossover with per-row prefix sums: {per_row} bits\n")
        report.write_csv(cfg.out / f"ops_{name}.csv")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=OpsConfig.rows)
    ap.add_argument("--seed", type=int, default=OpsConfig.seed)
    ap.add_argument("--out", type=Path, default=OpsConfig.out)
    args = ap.parse_args()
    run(OpsConfig(rows=args.rows, seed=args.seed, out=args.out))


if __name__ == "__main__":
    main()
