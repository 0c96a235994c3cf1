"""Command line entry points: node, client, scenario, bench."""
from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from dataclasses import replace

from .bench import BenchPoint, plot, sweep, write_csv
from .client import ClosedLoop, Workload
from .deploy import DeployConfig, LoadSummary, drive_client, serve_replica


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="deployment YAML (cluster parameters, replica addresses, key seed)")
    p.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--app", choices=("kvs", "ledger"), default=None)
    p.add_argument("--batch", type=int, default=None, help="batch_max")


def _deploy(args) -> DeployConfig:
    dc = DeployConfig.load(args.config)
    overrides = {}
    if args.batch is not None:
        overrides["batch_max"] = args.batch
    if overrides:
        dc.cluster = replace(dc.cluster, **overrides)
    if args.app is not None:
        dc.app = args.app
    clients = getattr(args, "clients", None)
    if clients is not None:
        dc.clients = max(dc.clients, clients + getattr(args, "client_id", 0))
    return dc


def cmd_node(args) -> int:
    dc = _deploy(args)
    if args.transport == "tcp":
        try:
            asyncio.run(serve_replica(dc, args.replica, args.duration))
        except KeyboardInterrupt:
            pass
        return 0
    # with the simulator a node is only meaningful inside a cluster; boot one and idle it
    from .harness.cluster import SimCluster

    cluster = SimCluster(dc.cluster, clients=0, seed=args.seed, app=dc.app)
    cluster.run(until=int((args.duration or 1.0) * 1000))
    broker = cluster.brokers[args.replica]
    print(f"replica {args.replica} booted: {', '.join(str(e.id) for e in broker.enclaves.values())}")
    return 0


def cmd_client(args) -> int:
    dc = _deploy(args)
    if args.transport == "tcp":
        summary = asyncio.run(drive_client(dc, args.client_id, args.ops, args.outstanding, args.seed, args.timeout))
    else:
        summary = _sim_load(dc, args)
    print("\n".join(summary.lines()))
    return 0 if summary.completed == args.ops * (1 if args.transport == "tcp" else args.clients) else 1


def _sim_load(dc: DeployConfig, args) -> LoadSummary:
    from .harness.cluster import SimCluster

    cluster = SimCluster(dc.cluster, clients=args.clients, seed=args.seed, app=dc.app)
    loops = [ClosedLoop(c, Workload(seed=args.seed * 31 + i, value_size=10), total=args.ops,
                        outstanding=args.outstanding) for i, c in enumerate(cluster.clients)]
    for loop in loops:
        loop.start()
    cluster.run(until=int(args.timeout * 1000), stop=lambda: all(l.finished for l in loops))
    lat = [float(op.response - op.invoke) for op in cluster.history.completed()]
    return LoadSummary(sum(l.completed for l in loops), cluster.now / 1000.0, lat)


def cmd_scenario(args) -> int:
    from .harness.scenario import Scenario, run

    ok = True
    for path in args.scenario:
        scenario = Scenario.load(path)
        if args.seed_override is not None:
            scenario.seed = args.seed_override
        result = run(scenario, args.trace)
        print(result.report())
        ok &= result.passed
    return 0 if ok else 1


def cmd_bench(args) -> int:
    dc = _deploy(args)
    base = {k: getattr(dc.cluster, k) for k in ("checkpoint_interval", "window")}
    points = []
    for app in args.apps or [dc.app]:
        for clients in args.clients_list or [args.clients]:
            for batch in args.batches or [dc.cluster.batch_max]:
                points.append(BenchPoint(clients, args.outstanding, batch, app, args.ops, args.seed,
                                         config=dict(base, window=max(base["window"], 2 * batch))))
    rows = sweep(points, repeats=args.repeats) if args.ops else []
    write_csv(rows, args.csv)
    print(f"wrote {len(rows)} rows to {args.csv}")
    if rows and args.plot:
        plot(rows, args.plot)
        print(f"wrote {args.plot}")
    for row in rows:
        print(f"{row['app']:6s} clients={row['clients']} batch={row['batch']} "
              f"ecalls/op={row['ecalls_per_op']:.3f} persist/batch={row['persist_per_batch']:.2f} "
              f"latency={row['latency_mean']:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compartbft", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("node", help="run one replica (broker and its three compartments)")
    _common(p)
    p.add_argument("--replica", type=int, required=True)
    p.add_argument("--duration", type=float, default=None, help="seconds to run; forever if omitted (tcp)")
    p.set_defaults(fn=cmd_node)

    p = sub.add_parser("client", help="drive a closed-loop workload and print a summary")
    _common(p)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--client-id", type=int, default=0, help="tcp: this process's client index")
    p.add_argument("--outstanding", type=int, default=1)
    p.add_argument("--ops", type=int, default=100)
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("scenario", help="run scenario files and check them; exit 1 on any mismatch")
    p.add_argument("--scenario", nargs="+", required=True)
    p.add_argument("--seed", dest="seed_override", type=int, default=None)
    p.add_argument("--trace", default=None, help="write the JSONL trace here")
    p.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("bench", help="sweep clients/batch/app on the simulator and write CSV")
    _common(p)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--clients-list", type=int, nargs="*", default=None)
    p.add_argument("--batches", type=int, nargs="*", default=None)
    p.add_argument("--apps", nargs="*", choices=("kvs", "ledger"), default=None)
    p.add_argument("--outstanding", type=int, default=1)
    p.add_argument("--ops", type=int, default=1000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv", default="bench.csv")
    p.add_argument("--plot", default=None, help="write a PNG summary plot here")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "transport", "sim") == "tcp" and args.command == "bench":
        print("bench runs on the simulator only", file=sys.stderr)
        return 2
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
