"""Beacon engine for the head-node scheduled MAC.

Layout of one non-realtime beacon (``beta`` realtime beacons long)::

    | A0 | RT-CF | RT-CP | NRT-CF ... | A1 | RT-CF | RT-CP | NRT-CF ... | NRT-CP |
      ^ all nodes awake     realtime frame of T_rf          ^ >= min contention

Announcements after the first only wake realtime senders/receivers and the
head. Without realtime nodes there is a single announcement and no
realtime frame.
"""

from __future__ import annotations

import math
from functools import lru_cache

from ..analytic import ChainParams, min_frame_duration
from ..core import (
    ConfigError,
    ProtocolParams,
    aggregate_bits,
    frame_airtime_int,
    ms_to_us,
)
from .contention_mac import ack_airtime, data_airtime
from .csma import AccessCategory, CsmaChannel
from .engine import Medium


@lru_cache(maxsize=256)
def derived_frame_slots(params: ProtocolParams, N: int, delta_star: float) -> int:
    return min_frame_duration(params, N, delta_star)


class ProposedMac:
    def __init__(self, world):
        self.w = w = world
        p = self.p = world.params
        cfg = world.config
        self.rng = world.rng_mac
        self.medium = Medium(world.radios)
        self.chan = CsmaChannel(p.mini_slot_us, self.rng)
        W = p.contention_window_W
        self.req_cat = AccessCategory("req", W - 1, W - 1, 0)
        self.t_data = data_airtime(p)
        self.t_ack = ack_airtime(p)
        self.t_rts = frame_airtime_int(p.rts_bits, p.basic_rate_bps, p)
        self.t_q = self.t_rts + p.sifs_us
        self.nrt_unit = self.t_data + p.sifs_us + self.t_ack + p.sifs_us
        self.t_status = frame_airtime_int(p.mac_header_bits, p.data_rate_bps, p) + p.sifs_us

        self.rt_nodes = [n.id for n in w.nodes if n.kind == "voice"]
        self.has_rt = bool(self.rt_nodes)
        self.rt_listeners = set(self.rt_nodes) | {w.nodes[i].dest for i in self.rt_nodes}
        cp = ChainParams.from_protocol(p, max(len(self.rt_nodes), 1), 0)
        self.t_v_slots = cp.t_v
        if self.has_rt:
            if cfg.T_rf_ms is not None:
                slots = ms_to_us(cfg.T_rf_ms) // p.mini_slot_us
            else:
                slots = derived_frame_slots(p, len(self.rt_nodes), cfg.delta_star)
            self.T_rf_slots = slots
            self.T_rf_us = slots * p.mini_slot_us
            self.M = slots // self.t_v_slots
            self.A_rt = self.announcement_time(min(self.M, len(self.rt_nodes)), ack=False)
        else:
            self.T_rf_slots = self.T_rf_us = self.M = 0
            self.A_rt = 0
        self.n_sub = p.beta if self.has_rt else 1
        if self.has_rt:
            free = p.T_rb_us - self.A_rt - self.T_rf_us
            if free < (p.min_contention_us if self.n_sub == 1 else 0):
                raise ConfigError(f"realtime frame of {self.T_rf_us} us does not fit the realtime beacon")

        self.head = int(self.rng.integers(len(w.nodes)))
        self.nrt_table = {}      # sender -> packets reported pending
        self.rt_table = {}       # sender -> None, insertion ordered
        self.nrt_rr = 0
        self.rt_rr = 0
        self.agg = {i: [] for i in self.rt_nodes}
        self.call_on = {i: False for i in self.rt_nodes}
        self.counters = {"head_changes": 0, "nominee_failures": 0, "rts_ok": 0, "rts_collided": 0,
                         "deferred_entries": 0, "beacons": 0}
        self.grant_log = []      # (beacon start, kind, sender, start, duration)
        self.keep_grant_log = False

    # -- airtimes -------------------------------------------------------------

    def announcement_time(self, n_grants, ack=True):
        p = self.p
        t = frame_airtime_int(p.sched_header_bits + n_grants * p.sched_entry_bits, p.basic_rate_bps, p)
        t += p.sifs_us
        t += self.t_ack + p.sifs_us      # nominee confirmation (reserved even when unused)
        return t

    def rt_frame_time(self, n_packets):
        if n_packets == 0:
            return self.t_status
        return frame_airtime_int(aggregate_bits(self.p, n_packets), self.p.data_rate_bps, self.p) + self.p.sifs_us

    # -- radio helpers ----------------------------------------------------------

    def _wake(self, ids, t):
        for i in ids:
            self.w.radios[i].wake(t)

    def _sleep(self, ids, t):
        for i in ids:
            if i != self.head:
                self.w.radios[i].sleep(t)

    # -- realtime ---------------------------------------------------------------

    def rt_boundary(self, t):
        """Form aggregates at a realtime beacon boundary and pick this beacon's grants."""
        st = self.w.stats
        for i in self.rt_nodes:
            call = self.w.nodes[i].source
            if self.agg[i]:
                st.rt_unit(self.agg[i][0], False)
            for g in self.agg[i]:
                st.expire(g, i, count_rt=False)
            new = call.advance(t)
            st.generated(i, len(new))
            self.agg[i] = new
            self.call_on[i] = call.on
        entries = list(self.rt_table)
        if not entries:
            return []
        start = self.rt_rr % len(entries)
        order = entries[start:] + entries[:start]
        grants, used = [], 0
        for i in order:
            if len(grants) >= self.M:
                break
            d = self.rt_frame_time(len(self.agg[i]))
            if used + d > self.T_rf_us:
                break
            grants.append((i, d))
            used += d
        self.rt_rr = start + len(grants)
        return grants

    def run_rt_cf(self, grants, t):
        w = self.w
        for i, d in grants:
            dst = w.nodes[i].dest
            self._wake((i, dst), t)
            air = d - self.p.sifs_us
            self.medium.frame(t, {i: air})
            if self.agg[i]:
                w.stats.rt_unit(self.agg[i][0], True)
            for g in self.agg[i]:
                w.stats.deliver(g, t + air, i, "voice", count_rt=False)
            self.agg[i] = []
            if not self.call_on[i]:
                self.rt_table.pop(i, None)
            if self.keep_grant_log:
                self.grant_log.append(("rt", i, t, d))
            t += d
            self._sleep((i, dst), t)
        return t

    # -- request contention -----------------------------------------------------

    def contention_period(self, t_start, t_end, candidates, on_success, late_joiners=None):
        """Single-shot request contention with a fixed window.

        ``candidates`` contend from ``t_start``; ``late_joiners(t)`` may add
        node ids as traffic arrives. Each node transmits at most one request
        and sleeps right after it.
        """
        chan, w = self.chan, self.w
        chan.reset(t_start)
        tried = set()
        awake = set()

        def join(i, t):
            if i in tried or i in awake:
                return
            awake.add(i)
            w.radios[i].wake(t)
            chan.activate(i, self.req_cat, t)

        for i in candidates:
            join(i, t_start)
        while True:
            t_tx, firing = chan.next_access()
            if late_joiners is not None:
                t_arr = w.events.peek_time()
                if t_arr <= t_tx and t_arr < t_end:
                    w.pump(t_arr)
                    for i in late_joiners(t_arr):
                        join(i, t_arr)
                    continue
            if t_tx == math.inf or t_tx + self.t_q > t_end:
                break
            self.medium.frame(t_tx, {c.node: self.t_rts for c in firing})
            busy_end = t_tx + self.t_q
            chan.busy(t_tx, busy_end, firing)
            if len(firing) == 1:
                self.counters["rts_ok"] += 1
                on_success(firing[0].node, t_tx)
            else:
                self.counters["rts_collided"] += 1
            for c in firing:
                chan.deactivate(c.key)
                tried.add(c.node)
                awake.discard(c.node)
                self._sleep((c.node,), busy_end)
        self._sleep(sorted(awake), t_end)
        chan.reset(t_end)

    # -- non-realtime schedule ----------------------------------------------------

    def allocate_nrt(self, segments):
        """Round-robin packet allocation over table entries, laid out into segments.

        Returns grant pieces ``(sender, start_us, n_packets)`` and the number of
        entries left with unscheduled demand.
        """
        entries = list(self.nrt_table.items())
        if not entries:
            return [], 0
        caps = [max(0, (b - a) // self.nrt_unit) for a, b in segments]
        cap = sum(caps)
        k = self.nrt_rr % len(entries)
        entries = entries[k:] + entries[:k]
        self.nrt_rr = k + 1
        remaining = {i: n for i, n in entries}
        alloc = dict.fromkeys(remaining, 0)
        while cap > 0:
            active = [i for i, _ in entries if remaining[i] > 0]
            if not active:
                break
            share = cap // len(active)
            if share == 0:
                for i in active[:cap]:
                    alloc[i] += 1
                    remaining[i] -= 1
                cap = 0
                break
            for i in active:
                g = min(share, remaining[i])
                alloc[i] += g
                remaining[i] -= g
                cap -= g
        pieces = []
        seg = 0
        seg_left = caps[0] if caps else 0
        cursor = segments[0][0] if segments else 0
        for i, _ in entries:
            n = alloc[i]
            while n > 0:
                while seg_left == 0:
                    seg += 1
                    seg_left = caps[seg]
                    cursor = segments[seg][0]
                g = min(n, seg_left)
                pieces.append((i, cursor, g))
                cursor += g * self.nrt_unit
                seg_left -= g
                n -= g
        deferred = sum(1 for i in remaining if remaining[i] > 0)
        return pieces, deferred

    def run_nrt_piece(self, sender, t, n):
        w, p = self.w, self.p
        node = w.nodes[sender]
        dst = node.dest
        self._wake((sender, dst), t)
        for _ in range(n):
            w.pump(t)
            pkt = node.queue.popleft()
            self.medium.frame(t, {sender: self.t_data})
            self.medium.frame(t + self.t_data + p.sifs_us, {dst: self.t_ack})
            w.stats.deliver(pkt.ready_us, t + self.t_data, sender, pkt.kind)
            left = len(node.queue)
            t += self.nrt_unit
        if left:
            self.nrt_table[sender] = left
        else:
            self.nrt_table.pop(sender, None)
        self._sleep((sender, dst), t)
        return t

    # -- main loop --------------------------------------------------------------

    def run(self):
        w, p = self.w, self.p
        T_nb, T_rb = p.T_nb_us, p.T_rb_us
        n_beacons = w.end_us // T_nb
        end = n_beacons * T_nb
        marked = False
        all_ids = [n.id for n in w.nodes]
        data_ids = [n.id for n in w.nodes if n.kind == "data"]
        for b in range(n_beacons):
            t0 = b * T_nb
            if not marked and t0 >= w.warmup_us:
                self.medium.mark(t0)
                w.stats.window_start = t0
                marked = True
            self.counters["beacons"] += 1
            w.pump(t0)
            rt_grants0 = self.rt_boundary(t0) if self.has_rt else []

            # non-realtime layout for the whole beacon
            n_entries = len(self.nrt_table)
            bound = len(rt_grants0) + n_entries * self.n_sub
            A0 = self.announcement_time(bound)
            segments = []
            for j in range(self.n_sub):
                tj = t0 + j * T_rb
                a = A0 if j == 0 else self.A_rt
                s0 = tj + a + self.T_rf_us
                s1 = tj + T_rb if self.has_rt else t0 + T_nb
                if j == self.n_sub - 1:
                    s1 = t0 + T_nb - p.min_contention_us
                segments.append((s0, max(s0, s1)))
            pieces, deferred = self.allocate_nrt(segments)
            self.counters["deferred_entries"] += deferred
            A0 = self.announcement_time(len(rt_grants0) + len(pieces))

            # first announcement: everyone listens, head nominates a successor
            self._wake(all_ids, t0)
            involved = {i for i, _ in rt_grants0} | {w.nodes[i].dest for i, _ in rt_grants0}
            involved |= {s for s, _, _ in pieces} | {w.nodes[s].dest for s, _, _ in pieces}
            self._announce(t0, len(rt_grants0) + len(pieces), involved)
            next_head = self._nominate(involved)
            self._sleep(all_ids, t0 + A0)

            by_seg = [[] for _ in range(self.n_sub)]
            for pc in pieces:
                for j, (s0, s1) in enumerate(segments):
                    if s0 <= pc[1] < max(s1, s0 + 1):
                        by_seg[j].append(pc)
                        break

            last_t = segments[-1][0]
            for j in range(self.n_sub):
                tj = t0 + j * T_rb
                if self.has_rt:
                    if j == 0:
                        grants, a = rt_grants0, A0
                    else:
                        grants = self.rt_boundary(tj)
                        a = self.A_rt
                        listeners = sorted(self.rt_listeners | {self.head})
                        self._wake(listeners, tj)
                        self._announce(tj, len(grants), set())
                        self._sleep(listeners, tj + a)
                    t = self.run_rt_cf(grants, tj + a)
                    cp_end = tj + a + self.T_rf_us
                    cands = [i for i in self.rt_nodes if self.call_on[i] and i not in self.rt_table]
                    self.contention_period(t, cp_end, cands, self._rt_request)
                t = segments[j][0]
                for sender, start, n in by_seg[j]:
                    t = self.run_nrt_piece(sender, start, n)
                if j == self.n_sub - 1:
                    last_t = max(t, segments[j][0])

            # non-realtime contention at the tail of the beacon
            w.pump(last_t)

            def eligible_now(_t):
                return [i for i in data_ids if w.nodes[i].queue and i not in self.nrt_table]

            self.contention_period(last_t, t0 + T_nb, eligible_now(last_t), self._nrt_request,
                                   late_joiners=eligible_now)
            if next_head is not None:
                self.counters["head_changes"] += 1
                w.radios[self.head].fill(t0 + T_nb)
                self.head = next_head
        if not marked:
            self.medium.mark(end)
            w.stats.window_start = end
        w.pump(end - 1)
        self.medium.finish(end)
        w.window_end = end
        queued = sum(len(n.queue) for n in w.nodes)
        if self.has_rt:
            for i in self.rt_nodes:
                queued += len(self.agg[i])
                late = w.nodes[i].source.advance(end)
                w.stats.generated(i, len(late))
                queued += len(late)
        w.queued_at_end = queued
        w.extra.update(self.counters)
        w.extra["T_rf_slots"] = self.T_rf_slots
        w.extra["M"] = self.M

    def _announce(self, t, n_grants, nominees):
        """Head broadcasts the schedule; a nominee confirms with an ACK."""
        p = self.p
        air = frame_airtime_int(p.sched_header_bits + n_grants * p.sched_entry_bits, p.basic_rate_bps, p)
        self.medium.frame(t, {self.head: air})
        self._pending_ack = (t + air + p.sifs_us)
        return air

    def _nominate(self, involved):
        cands = sorted(set(involved) - {self.head})
        if not cands:
            return None
        nominee = int(self.rng.choice(cands))
        if self.w.config.nominee_fail_prob and self.rng.random() < self.w.config.nominee_fail_prob:
            self.counters["nominee_failures"] += 1
            return None
        self.medium.frame(self._pending_ack, {nominee: self.t_ack})
        return nominee

    def _rt_request(self, i, t):
        self.rt_table[i] = None

    def _nrt_request(self, i, t):
        self.w.pump(t)
        n = len(self.w.nodes[i].queue)
        if n:
            self.nrt_table[i] = n
