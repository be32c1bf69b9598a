"""Deterministic discrete-event core: clock, event queue, metrics, processes.

Time is integer nanoseconds.  Events are processed in (fire_at, seq) order,
where seq is the global insertion counter, so two runs of the same
configuration and seed replay the exact same event sequence.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterator, Optional


class SchedulingInPast(Exception):
    """An event was scheduled before the current simulated time."""


class EmptySample(Exception):
    """A percentile was requested over an empty record list."""


class EventKind(Enum):
    LINK_DELIVERY = "link-delivery"
    POLL_TICK = "poll-tick"
    INTERRUPT = "interrupt"
    DMA_COMPLETE = "dma-complete"
    TIMER = "timer"
    WORKLOAD_STEP = "workload-step"


@dataclass
class SimEvent:
    fire_at: int
    seq: int
    kind: EventKind
    payload: Callable[[], None]


def percentile(latency_records, p: float) -> int:
    """Nearest-rank percentile: value at the ceil(p*n)-th smallest record.

    Records are (flow_id, duration_ns) pairs; bare durations are accepted too.
    """
    if not latency_records:
        raise EmptySample("no latency records")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must be in (0, 1], got {p}")
    durations = sorted(
        r[1] if isinstance(r, tuple) else r for r in latency_records
    )
    rank = math.ceil(p * len(durations))
    return durations[rank - 1]


class MetricsLog:
    """Counters, time samples and per-flow latency records for one run.

    Counters are monotone.  ``bucket`` accumulates byte counts into 1 ms
    windows for the time-series report.
    """

    WINDOW_NS = 1_000_000

    def __init__(self):
        self.counters: dict[str, int] = {}
        self.samples: list[tuple[int, str, int]] = []
        self.latency_records: list[tuple[Any, int]] = []
        self._windows: dict[str, dict[int, int]] = {}
        self._last_sample_t = 0

    def count(self, name: str, delta: int = 1) -> None:
        if delta < 0:
            raise ValueError(f"counter {name} cannot decrease")
        self.counters[name] = self.counters.get(name, 0) + delta

    def get(self, name: str) -> int:
        return self.counters.get(name, 0)

    def sample(self, t: int, name: str, value: int) -> None:
        if t < self._last_sample_t:
            raise ValueError("samples must be appended in time order")
        self._last_sample_t = t
        self.samples.append((t, name, value))

    def record_latency(self, flow_id, duration_ns: int) -> None:
        self.latency_records.append((flow_id, duration_ns))

    def bucket(self, t: int, name: str, delta: int) -> None:
        win = self._windows.setdefault(name, {})
        idx = t // self.WINDOW_NS
        win[idx] = win.get(idx, 0) + delta

    def window_rows(self) -> list[tuple[int, str, int]]:
        """(t_ms, metric, value) rows sorted by time then metric name."""
        rows = []
        for name in sorted(self._windows):
            for idx, val in self._windows[name].items():
                rows.append((idx, name, val))
        rows.sort(key=lambda r: (r[0], r[1]))
        return rows

    def percentile(self, p: float) -> int:
        return percentile(self.latency_records, p)


class Waitable:
    """Anything a process generator can yield on."""

    def subscribe(self, cb: Callable[[Any], None]) -> None:
        raise NotImplementedError


class Completion(Waitable):
    """One-shot latch.  Subscribing after the fire resumes immediately."""

    __slots__ = ("_engine", "done", "value", "_cbs")

    def __init__(self, engine: "Engine"):
        self._engine = engine
        self.done = False
        self.value = None
        self._cbs: list[Callable] = []

    def fire(self, value=None) -> None:
        if self.done:
            raise RuntimeError("completion fired twice")
        self.done = True
        self.value = value
        cbs, self._cbs = self._cbs, []
        for cb in cbs:
            self._engine.schedule(
                self._engine.now, EventKind.TIMER, lambda c=cb: c(value)
            )

    def subscribe(self, cb) -> None:
        if self.done:
            self._engine.schedule(
                self._engine.now, EventKind.TIMER, lambda: cb(self.value)
            )
        else:
            self._cbs.append(cb)


class Notify(Waitable):
    """Recurring signal: subscribers wait for the next fire only."""

    __slots__ = ("_engine", "_cbs")

    def __init__(self, engine: "Engine"):
        self._engine = engine
        self._cbs: list[Callable] = []

    def fire(self, value=None) -> None:
        cbs, self._cbs = self._cbs, []
        for cb in cbs:
            self._engine.schedule(
                self._engine.now, EventKind.TIMER, lambda c=cb: c(value)
            )

    def subscribe(self, cb) -> None:
        self._cbs.append(cb)


class SerialResource:
    """Cooperative mutex serialising the work of one executor (a CN core,
    the control-plane processor).  FIFO hand-off keeps runs deterministic."""

    __slots__ = ("_engine", "_locked", "_waiters", "busy_ns", "_held_since")

    def __init__(self, engine: "Engine"):
        self._engine = engine
        self._locked = False
        self._waiters: deque[Completion] = deque()
        self.busy_ns = 0
        self._held_since = 0

    def acquire(self) -> Completion:
        c = Completion(self._engine)
        if not self._locked:
            self._locked = True
            self._held_since = self._engine.now
            c.fire()
        else:
            self._waiters.append(c)
        return c

    def release(self) -> None:
        self.busy_ns += self._engine.now - self._held_since
        if self._waiters:
            self._held_since = self._engine.now
            self._waiters.popleft().fire()
        else:
            self._locked = False

    def busy(self, ns: int) -> Iterator[Waitable]:
        """Hold the resource for a fixed duration (use with ``yield from``)."""
        yield self.acquire()
        if ns:
            yield self._engine.sleep(ns)
        self.release()

    def busy_until(self, waitable: Waitable) -> Iterator[Waitable]:
        """Hold the resource until an externally timed operation completes."""
        yield self.acquire()
        yield waitable
        self.release()


class Watermark:
    """Monotone byte counter with threshold wake-ups (delivery tracking)."""

    __slots__ = ("_engine", "value", "_waiters")

    def __init__(self, engine: "Engine"):
        self._engine = engine
        self.value = 0
        self._waiters: list[tuple[int, Completion]] = []

    def advance(self, delta: int) -> None:
        if delta < 0:
            raise ValueError("watermark is monotone")
        self.value += delta
        if not self._waiters:
            return
        still = []
        for target, c in self._waiters:
            if self.value >= target:
                c.fire(self.value)
            else:
                still.append((target, c))
        self._waiters = still

    def wait_for(self, target: int) -> Completion:
        c = Completion(self._engine)
        if self.value >= target:
            c.fire(self.value)
        else:
            self._waiters.append((target, c))
        return c


class Engine:
    """Single-threaded deterministic event loop with seeded randomness."""

    def __init__(self, seed: int = 0):
        self.now: int = 0
        self.rng = random.Random(seed)
        self.metrics = MetricsLog()
        self.trace: Optional[Callable[[dict], None]] = None
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = 0

    # -- event queue ------------------------------------------------------

    def schedule(self, t: int, kind: EventKind, action: Callable[[], None]) -> int:
        if t < self.now:
            raise SchedulingInPast(f"schedule at t={t} but now={self.now}")
        self._seq += 1
        ev = SimEvent(t, self._seq, kind, action)
        heapq.heappush(self._heap, (t, self._seq, ev))
        return self._seq

    def after(self, delay_ns: int, kind: EventKind, action) -> int:
        return self.schedule(self.now + delay_ns, kind, action)

    def run_until(self, t_end: Optional[int] = None) -> MetricsLog:
        """Process events with fire_at <= t_end (all of them when None)."""
        while self._heap:
            t, _seq, ev = self._heap[0]
            if t_end is not None and t > t_end:
                break
            heapq.heappop(self._heap)
            self.now = t
            ev.payload()
        if t_end is not None and t_end > self.now:
            self.now = t_end
        return self.metrics

    @property
    def pending_events(self) -> int:
        return len(self._heap)

    # -- process layer ----------------------------------------------------

    def completion(self) -> Completion:
        return Completion(self)

    def completion_at(self, t: int, kind: EventKind = EventKind.TIMER) -> Completion:
        c = Completion(self)
        self.schedule(t, kind, lambda: c.fire())
        return c

    def sleep(self, ns: int, kind: EventKind = EventKind.TIMER) -> Completion:
        return self.completion_at(self.now + ns, kind)

    def spawn(self, gen: Iterator, kind: EventKind = EventKind.TIMER) -> None:
        """Drive a generator that yields Waitables; values are sent back in."""

        def step(value=None):
            try:
                waitable = gen.send(value)
            except StopIteration:
                return
            waitable.subscribe(step)

        self.schedule(self.now, kind, lambda: step(None))

    def emit_trace(self, **fields) -> None:
        if self.trace is not None:
            fields["t"] = self.now
            self.trace(fields)
