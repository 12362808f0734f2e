#!/usr/bin/env python3
"""Differential run against the plaintext oracle, then the fault-injection sweep."""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass

from hedb.circuits import FAULTS
from hedb.harness import differential_run


@dataclass
class DiffConfig:
    seed: int = 0
    scenarios: int = 200
    fault_seed: int = 1
    fault_scenarios: int = 200
    sweep: bool = True


def run(cfg: DiffConfig) -> bool:
    report = differential_run(cfg.seed, cfg.scenarios)
    print(report.to_text())
    ok = report.passed
    if cfg.sweep:
        print("\nfault sweep (each fault must produce a counterexample):")
        for fault in FAULTS:
            r = differential_run(cfg.fault_seed, cfg.fault_scenarios, [fault], stop_on_failure=True)
            caught = not r.passed
            where = f"after {sum(r.kinds.values())} scenarios" if caught else "NOT CAUGHT"
            print(f"  {fault:<24} {where}")
            ok &= caught
    return ok


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=DiffConfig.seed)
    ap.add_argument("--scenarios", type=int, default=DiffConfig.scenarios)
    ap.add_argument("--no-sweep", dest="sweep", action="store_false")
    args = ap.parse_args()
    sys.exit(0 if run(DiffConfig(args.seed, args.scenarios, sweep=args.sweep)) else 1)


if __name__ == "__main__":
    main()
