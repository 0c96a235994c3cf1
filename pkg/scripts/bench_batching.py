#!/usr/bin/env python3
"""Sweep batch size for both apps and write a CSV plus a plot.

Throughput here is network-bound: the simulator charges no CPU time for
crypto or enclave transitions, so the interesting columns are the boundary
counters (ecalls per op, persistence effects per batch).
"""
import argparse
from pathlib import Path

from compartbft.bench import BenchPoint, plot, sweep, write_csv


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ops", type=int, default=10_000)
    parser.add_argument("--clients", type=int, default=10)
    parser.add_argument("--outstanding", type=int, default=40)
    parser.add_argument("--batches", type=int, nargs="+", default=[1, 10, 50, 200])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--out", type=Path, default=Path("results"))
    args = parser.parse_args()

    points = [BenchPoint(args.clients, args.outstanding, b, app, args.ops, config=dict(window=max(400, 2 * b)))
              for app in ("kvs", "ledger") for b in args.batches]
    rows = sweep(points, repeats=args.repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, args.out / "batching.csv")
    plot(rows, args.out / "batching.png")
    base = {r["app"]: r["ecalls_per_op"] for r in rows if r["batch"] == args.batches[0]}
    for r in rows:
        print(f"{r['app']:6s} batch={r['batch']:4d} ecalls/op={r['ecalls_per_op']:8.4f} "
              f"(1/{base[r['app']] / r['ecalls_per_op']:.0f} of batch {args.batches[0]}) "
              f"persist/batch={r['persist_per_batch']:.1f} throughput={r['throughput']:.0f}")
    print(f"wrote {args.out / 'batching.csv'} and {args.out / 'batching.png'}")


if __name__ == "__main__":
    main()
