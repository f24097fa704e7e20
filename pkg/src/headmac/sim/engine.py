"""Simulation plumbing: event list, per-node radio bookkeeping, shared medium."""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field

from ..core import EnergyLedger, ProtocolParams


class ChannelConflict(RuntimeError):
    """Two transmissions overlapped without being declared a collision."""


class RadioAsleep(RuntimeError):
    pass


# tie-break priority for events at the same instant and node
KIND_PRIORITY = {"beacon": 0, "voice": 1, "data": 2}


class EventQueue:
    """Binary heap ordered by (time, node id, kind priority, insertion order)."""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, time, node, kind, payload=None):
        heapq.heappush(self._heap, (time, node, KIND_PRIORITY.get(kind, 9), next(self._seq), kind, payload))

    def peek_time(self):
        return self._heap[0][0] if self._heap else float("inf")

    def pop(self):
        time, node, _, _, kind, payload = heapq.heappop(self._heap)
        return time, node, kind, payload

    def __len__(self):
        return len(self._heap)


@dataclass
class Packet:
    src: int
    dst: int
    ready_us: int
    kind: str = "data"


class Radio:
    """Tracks one node's radio mode over time and charges it to a ledger.

    Between explicit transmit/receive intervals the radio sits in its base
    mode (idle when awake, sleep otherwise). Calls must come in time order.
    """

    __slots__ = ("ledger", "cursor", "awake", "mark")

    def __init__(self, params: ProtocolParams, t0=0, awake=True):
        self.ledger = EnergyLedger(params)
        self.cursor = t0
        self.awake = awake
        self.mark = None

    def fill(self, t):
        if t > self.cursor:
            self.ledger.accrue("idle" if self.awake else "sleep", t - self.cursor)
            self.cursor = t

    def wake(self, t):
        self.fill(t)
        self.awake = True

    def sleep(self, t):
        self.fill(t)
        self.awake = False

    def busy(self, t0, dur, mode):
        if not self.awake:
            raise RadioAsleep(f"radio asleep at {t0} cannot {mode}")
        if t0 < self.cursor:
            raise ChannelConflict(f"radio already busy until {self.cursor}, asked at {t0}")
        self.fill(t0)
        self.ledger.accrue(mode, dur)
        self.cursor = t0 + dur


class Medium:
    """Fully connected, error-free channel shared by all radios."""

    def __init__(self, radios):
        self.radios = radios
        self.busy_until = 0
        self.n_frames = 0
        self.n_collided = 0
        self.airtime_us = 0

    def frame(self, t0, durations: dict):
        """Put one or more simultaneous frames on the air starting at ``t0``.

        ``durations`` maps sender id to airtime. More than one sender marks
        every frame collided. Awake non-senders receive for the longest one.
        Returns the end time of the busy interval.
        """
        if t0 < self.busy_until:
            raise ChannelConflict(f"frame at {t0} overlaps busy channel until {self.busy_until}")
        longest = max(durations.values())
        for sid, d in durations.items():
            self.radios[sid].busy(t0, d, "transmit")
        for i, r in enumerate(self.radios):
            if i not in durations and r.awake:
                r.busy(t0, longest, "receive")
        self.busy_until = t0 + longest
        self.n_frames += 1
        if len(durations) > 1:
            self.n_collided += 1
        self.airtime_us += longest
        return self.busy_until

    def mark(self, t):
        """Bring every radio up to ``t`` and remember the ledgers there."""
        for r in self.radios:
            r.fill(max(t, r.cursor))
            r.mark = r.ledger.snapshot()

    def finish(self, t):
        for r in self.radios:
            r.fill(t)


@dataclass
class Stats:
    """Delivery and loss counters; only events at or after ``window_start`` count."""

    window_start: float = float("inf")   # set when the measurement window opens
    delivered: int = 0
    delay_sum_us: int = 0
    delivered_nrt: int = 0
    delivered_rt: int = 0
    rt_lost: int = 0
    rt_ok: int = 0
    # whole-run conservation counters
    generated_total: int = 0
    delivered_total: int = 0
    expired_total: int = 0
    per_node: dict = field(default_factory=dict)

    def _node(self, i):
        return self.per_node.setdefault(i, {"generated": 0, "delivered": 0, "expired": 0})

    def generated(self, node, n=1):
        self.generated_total += n
        self._node(node)["generated"] += n

    def deliver(self, pkt_ready_us, t_rx, node, kind="data", count_rt=True):
        self.delivered_total += 1
        self._node(node)["delivered"] += 1
        if count_rt and kind == "voice" and pkt_ready_us >= self.window_start:
            self.rt_ok += 1
        if t_rx >= self.window_start:
            self.delivered += 1
            self.delay_sum_us += t_rx - pkt_ready_us
            if kind == "voice":
                self.delivered_rt += 1
            else:
                self.delivered_nrt += 1

    def expire(self, pkt_ready_us, node, count_rt=True):
        self.expired_total += 1
        self._node(node)["expired"] += 1
        if count_rt and pkt_ready_us >= self.window_start:
            self.rt_lost += 1

    def rt_unit(self, first_ready_us, ok: bool):
        """Fate of one realtime unit counted separately from its packets (aggregates)."""
        if first_ready_us >= self.window_start:
            if ok:
                self.rt_ok += 1
            else:
                self.rt_lost += 1


def fifo():
    return deque()
