"""IEEE 802.11 power-save mode (IBSS) baseline.

Every beacon opens with an ATIM window in which all nodes are awake and
senders announce buffered traffic (ATIM / ATIM-ACK under CSMA/CA). Nodes
that neither announced nor were announced to sleep for the rest of the
beacon; announced pairs stay up and exchange data with basic DCF
(data + ACK, no RTS/CTS). A window covering the whole beacon leaves
nobody asleep and runs as plain DCF.
"""

from __future__ import annotations

import math

from ..core import frame_airtime_int, ms_to_us
from .contention_mac import ContentionMac, ack_airtime, data_airtime, dcf_category
from .csma import AccessCategory, CsmaChannel
from .engine import Medium


class PsmMac:
    def __init__(self, world, atim_ms: float):
        self.w = world
        p = self.p = world.params
        self.atim_us = ms_to_us(atim_ms)
        self.chan = CsmaChannel(p.mini_slot_us, world.rng_mac)
        self.medium = Medium(world.radios)
        self.cat_atim = AccessCategory("atim", p.cw_min, p.cw_max, p.difs_us)
        self.cat_data = dcf_category(p)
        self.t_atim = frame_airtime_int(p.atim_bits, p.basic_rate_bps, p)
        self.t_atim_ack = frame_airtime_int(p.atim_ack_bits, p.basic_rate_bps, p)
        self.t_data = data_airtime(p)
        self.t_ack = ack_airtime(p)
        self.awake_beacons = 0

    # -- one contention phase -------------------------------------------------

    def _phase(self, t_start, t_stop, ac, eligible, exchange_time, on_success):
        w, chan = self.w, self.chan
        chan.reset(t_start)
        w.pump(t_start)
        for n in w.nodes:
            if eligible(n):
                chan.activate(n.id, ac, t_start)
        while True:
            t_tx, firing = chan.next_access()
            t_arr = w.events.peek_time()
            if t_arr <= t_tx and t_arr < t_stop:
                w.pump(t_arr)
                for n in w.nodes:
                    if eligible(n):
                        chan.activate(n.id, ac, t_arr)
                continue
            if t_tx == math.inf or t_tx >= t_stop:
                break
            dur = exchange_time
            if t_tx + dur > t_stop:
                # not enough of the phase left; these nodes defer to the next beacon
                for c in firing:
                    chan.deactivate(c.key)
                continue
            if len(firing) == 1:
                c = firing[0]
                on_success(c.node, t_tx)
                chan.busy(t_tx, t_tx + dur, firing)
                chan.success(c, t_tx + dur, eligible(self.w.nodes[c.node]))
            else:
                first = self.t_atim if ac is self.cat_atim else self.t_data
                self.medium.frame(t_tx, {c.node: first for c in firing})
                chan.busy(t_tx, t_tx + dur, firing)
                for c in firing:
                    chan.failure(c, t_tx + dur)

    # -- beacon loop ----------------------------------------------------------

    def run(self):
        w, p = self.w, self.p
        T = p.T_nb_us
        if self.atim_us >= T:
            # nobody ever sleeps, so announcing is pointless: plain DCF
            ContentionMac(w, {"be": self.cat_data}).run(w.end_us)
            w.extra["mean_awake_nodes"] = len(w.nodes)
            return
        n_beacons = w.end_us // T
        end = n_beacons * T
        A = min(self.atim_us, T)
        marked = False
        for b in range(n_beacons):
            t0 = b * T
            if not marked and t0 >= w.warmup_us:
                self.medium.mark(t0)
                w.stats.window_start = t0
                marked = True
            for r in w.radios:
                r.wake(t0)
            announced = set()
            awake = set()

            def atim_eligible(n):
                return bool(n.queue) and n.id not in announced

            def atim_ok(src, t):
                dst = w.nodes[src].dest
                self.medium.frame(t, {src: self.t_atim})
                self.medium.frame(t + self.t_atim + p.sifs_us, {dst: self.t_atim_ack})
                announced.add(src)
                awake.update((src, dst))

            self._phase(t0, t0 + A, self.cat_atim, atim_eligible,
                        self.t_atim + p.sifs_us + self.t_atim_ack, atim_ok)
            for i, r in enumerate(w.radios):
                if i not in awake:
                    r.sleep(t0 + A)
            self.awake_beacons += len(awake)

            def data_eligible(n):
                return bool(n.queue) and n.id in announced

            def data_ok(src, t):
                node = w.nodes[src]
                pkt = node.queue.popleft()
                self.medium.frame(t, {src: self.t_data})
                self.medium.frame(t + self.t_data + p.sifs_us, {pkt.dst: self.t_ack})
                w.stats.deliver(pkt.ready_us, t + self.t_data, src, pkt.kind)

            if A < T:
                self._phase(t0 + A, t0 + T, self.cat_data, data_eligible,
                            self.t_data + p.sifs_us + self.t_ack, data_ok)
        if not marked:
            self.medium.mark(end)
            w.stats.window_start = end
        w.pump(end - 1)
        self.medium.finish(end)
        w.window_end = end
        w.queued_at_end = sum(len(n.queue) for n in w.nodes)
        w.extra["mean_awake_nodes"] = self.awake_beacons / max(n_beacons, 1)
