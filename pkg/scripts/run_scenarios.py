#!/usr/bin/env python3
"""Run every scenario under scenarios/ (or the ones named) and print each report.

Exits non-zero if any scenario's outcome differs from its expectations.
"""
import argparse
import sys
import time
from pathlib import Path

from compartbft.harness.scenario import Scenario, run

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("names", nargs="*", help="scenario file stems; all if omitted")
    parser.add_argument("--traces", type=Path, default=None, help="directory for JSONL traces")
    args = parser.parse_args()

    paths = [ROOT / "scenarios" / f"{n}.yaml" for n in args.names] or sorted((ROOT / "scenarios").glob("*.yaml"))
    bad = []
    for path in paths:
        start = time.perf_counter()
        trace = args.traces / f"{path.stem}.jsonl" if args.traces else None
        result = run(Scenario.load(path), trace)
        print(result.report())
        print(f"  wall             {time.perf_counter() - start:.1f}s\n")
        if not result.passed:
            bad.append(path.stem)
    if bad:
        print("mismatched:", ", ".join(bad))
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
