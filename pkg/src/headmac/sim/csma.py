"""Slotted CSMA/CA backoff shared by the DCF, EDCA and PSM engines.

Each backoff entity (a node, or one access category of a node) counts down
idle slots after its own inter-frame space; counters freeze while the medium
is busy. Entities reaching zero in the same slot collide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class AccessCategory:
    name: str
    cw_min: int
    cw_max: int
    ifs_us: int          # DIFS or AIFS
    priority: int = 0    # higher wins an internal collision
    txop_us: int = 0


@dataclass
class Contender:
    node: int
    ac: AccessCategory
    cw: int
    counter: int
    count_from: int
    retries: int = 0

    @property
    def key(self):
        return (self.node, self.ac.name)

    def tx_time(self, slot):
        return self.count_from + self.counter * slot


class CsmaChannel:
    def __init__(self, slot_us: int, rng):
        self.slot = slot_us
        self.rng = rng
        self.active = {}
        self.idle_start = 0

    def _start_after(self, t, ac):
        base = self.idle_start + ac.ifs_us
        if t <= base:
            return base
        return base + math.ceil((t - base) / self.slot) * self.slot

    def draw(self, cw):
        return int(self.rng.integers(0, cw + 1))

    def activate(self, node, ac: AccessCategory, t):
        """Give ``node`` a fresh backoff for ``ac`` if it is not already contending."""
        key = (node, ac.name)
        if key in self.active:
            return self.active[key]
        c = Contender(node, ac, ac.cw_min, self.draw(ac.cw_min), self._start_after(t, ac))
        self.active[key] = c
        return c

    def deactivate(self, key):
        self.active.pop(key, None)

    def reset(self, t):
        """Drop every contender and treat the medium as idle from ``t``."""
        self.active.clear()
        self.idle_start = t

    def next_access(self):
        """Earliest slot at which some entity transmits, and all entities firing then."""
        if not self.active:
            return math.inf, []
        t = min(c.tx_time(self.slot) for c in self.active.values())
        return t, [c for c in self.active.values() if c.tx_time(self.slot) == t]

    def resolve_internal(self, firing):
        """Split firing entities into transmitters and internal-collision losers.

        Within one node only the highest-priority category transmits.
        """
        best = {}
        for c in firing:
            cur = best.get(c.node)
            if cur is None or c.ac.priority > cur.ac.priority:
                best[c.node] = c
        tx = list(best.values())
        losers = [c for c in firing if best[c.node] is not c]
        return tx, losers

    def busy(self, t_tx, busy_end, firing):
        """Freeze the counters of everyone not firing and restart them after ``busy_end``."""
        fired = {id(c) for c in firing}
        for c in self.active.values():
            if id(c) in fired:
                continue
            if t_tx > c.count_from:
                c.counter -= (t_tx - c.count_from) // self.slot
            c.count_from = busy_end + c.ac.ifs_us
        self.idle_start = busy_end

    def success(self, c: Contender, busy_end, more: bool):
        c.retries = 0
        c.cw = c.ac.cw_min
        if more:
            c.counter = self.draw(c.cw)
            c.count_from = busy_end + c.ac.ifs_us
        else:
            self.deactivate(c.key)

    def failure(self, c: Contender, busy_end):
        c.retries += 1
        c.cw = min(2 * c.cw + 1, c.ac.cw_max)
        c.counter = self.draw(c.cw)
        c.count_from = busy_end + c.ac.ifs_us
