"""Deterministic discrete-event scheduler and simulated network.

Time is an integer tick count.  Events scheduled for the same tick run in
the order they were scheduled, so a run is a pure function of the seed.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Callable, Hashable

Endpoint = Hashable


class Timer:
    __slots__ = ("when", "fn", "cancelled")

    def __init__(self, when: int, fn: Callable[[], None]):
        self.when = when
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    def __init__(self) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, Timer]] = []
        self._seq = 0
        self.executed = 0

    def time(self) -> int:
        return self.now

    def call_at(self, when: int, fn: Callable[[], None]) -> Timer:
        timer = Timer(max(when, self.now), fn)
        self._seq += 1
        heapq.heappush(self._queue, (timer.when, self._seq, timer))
        return timer

    def call_later(self, delay: int, fn: Callable[[], None]) -> Timer:
        return self.call_at(self.now + max(0, int(delay)), fn)

    def pending(self) -> int:
        return sum(1 for _, _, t in self._queue if not t.cancelled)

    def step(self) -> bool:
        while self._queue:
            when, _, timer = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = when
            self.executed += 1
            timer.fn()
            return True
        return False

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> int:
        """Run events until the queue drains, ``until`` is reached or ``stop()`` holds."""
        count = 0
        while self._queue:
            if stop is not None and stop():
                break
            if max_events is not None and count >= max_events:
                break
            when = self._queue[0][0]
            if until is not None and when > until:
                self.now = until
                break
            if self.step():
                count += 1
        else:
            if until is not None and self.now < until:
                self.now = until
        return count


@dataclass
class LinkPolicy:
    """Delivery behaviour of one directed link (or the default for all links)."""

    delay: int = 1
    jitter: int = 0
    drop: float = 0.0
    duplicate: float = 0.0


@dataclass
class NetStats:
    frames: int = 0
    bytes: int = 0
    dropped: int = 0
    duplicated: int = 0


class SimNetwork:
    """Carries encoded frames between endpoints over the shared scheduler.

    ``liveness`` turns off every probabilistic drop; partitions still apply
    until healed.  ``taps`` see every frame and are how the confidentiality
    checker observes the wire.
    """

    def __init__(self, scheduler: Scheduler, seed: int = 0, default: LinkPolicy | None = None,
                 liveness: bool = False):
        self.scheduler = scheduler
        self.rng = random.Random(seed)
        self.default = default or LinkPolicy()
        self.links: dict[tuple[Endpoint, Endpoint], LinkPolicy] = {}
        self.endpoints: dict[Endpoint, Callable[[Endpoint, bytes], None]] = {}
        self.partitions: list[tuple[frozenset, frozenset]] = []
        self.liveness = liveness
        self.taps: list[Callable[[Endpoint, Endpoint, bytes], None]] = []
        self.stats = NetStats()
        self.down: set[Endpoint] = set()

    def register(self, name: Endpoint, deliver: Callable[[Endpoint, bytes], None]) -> None:
        self.endpoints[name] = deliver

    def set_link(self, src: Endpoint, dst: Endpoint, policy: LinkPolicy) -> None:
        self.links[(src, dst)] = policy

    def partition(self, side_a, side_b) -> None:
        self.partitions.append((frozenset(side_a), frozenset(side_b)))

    def heal(self) -> None:
        self.partitions.clear()

    def _cut(self, src, dst) -> bool:
        for a, b in self.partitions:
            if (src in a and dst in b) or (src in b and dst in a):
                return True
        return False

    def send(self, src: Endpoint, dst: Endpoint, data: bytes) -> None:
        self.stats.frames += 1
        self.stats.bytes += len(data)
        for tap in self.taps:
            tap(src, dst, data)
        if dst not in self.endpoints or dst in self.down or src in self.down or self._cut(src, dst):
            self.stats.dropped += 1
            return
        policy = self.links.get((src, dst), self.default)
        if not self.liveness and policy.drop and self.rng.random() < policy.drop:
            self.stats.dropped += 1
            return
        copies = 1
        if policy.duplicate and self.rng.random() < policy.duplicate:
            copies = 2
            self.stats.duplicated += 1
        for _ in range(copies):
            delay = policy.delay + (self.rng.randint(0, policy.jitter) if policy.jitter else 0)
            self.scheduler.call_later(delay, lambda d=data: self._deliver(src, dst, d))

    def _deliver(self, src: Endpoint, dst: Endpoint, data: bytes) -> None:
        if dst in self.down:
            return
        self.endpoints[dst](src, data)
