"""Benchmark sweeps on the simulated network: throughput, latency and boundary crossings."""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from .client import ClosedLoop, Workload
from .config import CompartmentKind, Config
from .harness.cluster import SimCluster

REPEATS = 5
COLUMNS = [
    "clients", "outstanding", "batch", "app", "ops", "completed", "ticks", "throughput", "latency_mean",
    "latency_p99", "ecalls_prep", "ecalls_conf", "ecalls_exec", "ecalls_per_op", "ocalls", "persist",
    "persist_per_batch", "batches", "repeats",
]


@dataclass(frozen=True)
class BenchPoint:
    clients: int = 1
    outstanding: int = 1
    batch: int = 1
    app: str = "kvs"
    ops: int = 1000
    seed: int = 0
    config: dict = field(default_factory=dict, hash=False)

    def cfg(self) -> Config:
        base = dict(checkpoint_interval=100, window=400, batch_timeout=5, request_timeout=20_000,
                    viewchange_timeout=40_000)
        base.update(self.config)
        base["batch_max"] = self.batch
        return Config(**base)


@dataclass
class BenchResult:
    point: BenchPoint
    completed: int
    ticks: int
    latencies: list[int]
    ecalls: dict[str, int]
    ocalls: int
    persist: int
    batches: int

    @property
    def ecalls_per_op(self) -> float:
        return sum(self.ecalls.values()) / max(1, self.completed)

    def row(self) -> dict:
        lat = sorted(self.latencies) or [0]
        p99 = lat[min(len(lat) - 1, int(0.99 * len(lat)))]
        p = self.point
        return {
            "clients": p.clients, "outstanding": p.outstanding, "batch": p.batch, "app": p.app, "ops": p.ops,
            "completed": self.completed, "ticks": self.ticks,
            # one tick stands for one millisecond
            "throughput": 1000.0 * self.completed / max(1, self.ticks),
            "latency_mean": statistics.fmean(lat), "latency_p99": float(p99),
            "ecalls_prep": self.ecalls["prep"], "ecalls_conf": self.ecalls["conf"],
            "ecalls_exec": self.ecalls["exec"], "ecalls_per_op": self.ecalls_per_op,
            "ocalls": self.ocalls, "persist": self.persist,
            "persist_per_batch": self.persist / max(1, self.batches), "batches": self.batches, "repeats": 1,
        }


def run_point(point: BenchPoint) -> BenchResult:
    cfg = point.cfg()
    cluster = SimCluster(cfg, clients=point.clients, seed=point.seed, app=point.app)
    batches = {"n": 0}

    def count(kind, name, fields):
        if kind is CompartmentKind.EXECUTION and name == "executed" and fields["size"]:
            batches["n"] += 1

    # batches and persistence are counted at one replica; ecalls over the whole cluster
    cluster.brokers[0].listeners.append(count)
    share = [point.ops // point.clients + (1 if c < point.ops % point.clients else 0) for c in range(point.clients)]
    loops = [ClosedLoop(client, Workload(seed=point.seed * 31 + c, value_size=10), total=share[c],
                        outstanding=point.outstanding) for c, client in enumerate(cluster.clients)]
    for loop in loops:
        loop.start()
    if point.ops:
        cluster.run(stop=lambda: all(loop.finished for loop in loops))
    ecalls = {k.short: sum(b.stats.ecalls[k] for b in cluster.brokers) for k in CompartmentKind}
    latencies = [op.response - op.invoke for op in cluster.history.completed()]
    return BenchResult(point, sum(l.completed for l in loops), cluster.now, latencies, ecalls,
                       sum(b.stats.ocalls for b in cluster.brokers), len(cluster.brokers[0].store.records),
                       batches["n"])


def mean_row(rows: list[dict]) -> dict:
    out = dict(rows[0])
    for key in COLUMNS:
        if isinstance(out[key], (int, float)) and key not in ("clients", "outstanding", "batch", "ops"):
            out[key] = statistics.fmean(r[key] for r in rows)
    out["repeats"] = len(rows)
    return out


def sweep(points: list[BenchPoint], repeats: int = REPEATS) -> list[dict]:
    """Each point is run ``repeats`` times with different seeds and averaged."""
    rows = []
    for point in points:
        runs = [run_point(replace(point, seed=point.seed + i)).row() for i in range(repeats)]
        rows.append(mean_row(runs))
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in COLUMNS})


def plot(rows: list[dict], path: str | Path) -> None:
    """Static throughput and ecalls-per-op bar charts, one bar per point."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{r['app']} c{r['clients']}x{r['outstanding']} b{r['batch']}" for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(rows) + 4), 4))
    ax1.bar(labels, [r["throughput"] for r in rows])
    ax1.set_ylabel("ops per simulated second")
    ax2.bar(labels, [r["ecalls_per_op"] for r in rows])
    ax2.set_ylabel("ecalls per completed op")
    ax2.set_yscale("log")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


__all__ = ["BenchPoint", "BenchResult", "COLUMNS", "REPEATS", "mean_row", "plot", "run_point", "sweep",
           "write_csv"]
