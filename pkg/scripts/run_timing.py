#!/usr/bin/env python3
"""Encrypted product timing over a lambda x width grid (recrypt after every product)."""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

from hedb.harness import bench_timing


@dataclass
class TimingConfig:
    lambdas: tuple[int, ...] = (2, 3, 4)
    widths: tuple[int, ...] = (4, 8, 16)
    repeats: int = 3
    seed: int = 0
    out: Path = Path("results")


def run(cfg: TimingConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    report = bench_timing(cfg.lambdas, cfg.widths, cfg.seed, cfg.repeats)
    print(report.timing_text())
    report.write_csv(cfg.out / "timing.csv")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambdas", type=_ints, default=TimingConfig.lambdas)
    ap.add_argument("--widths", type=_ints, default=TimingConfig.widths)
    ap.add_argument("--repeats", type=int, default=TimingConfig.repeats)
    ap.add_argument("--seed", type=int, default=TimingConfig.seed)
    ap.add_argument("--out", type=Path, default=TimingConfig.out)
    args = ap.parse_args()
    run(TimingConfig(args.lambdas, args.widths, args.repeats, args.seed, args.out))


if __name__ == "__main__":
    main()
