"""Always-awake contention MACs: DCF-W and EDCA-W."""

from __future__ import annotations

import math

from ..core import ProtocolParams, aggregate_bits, frame_airtime_int
from .csma import AccessCategory, CsmaChannel
from .engine import Medium, Packet


def data_airtime(params: ProtocolParams) -> int:
    return frame_airtime_int(params.data_packet_bits + params.mac_header_bits, params.data_rate_bps, params)


def voice_airtime(params: ProtocolParams) -> int:
    """One unaggregated voice packet with its UDP/RTP/IP and MAC headers."""
    return frame_airtime_int(aggregate_bits(params, 1), params.data_rate_bps, params)


def ack_airtime(params: ProtocolParams) -> int:
    return frame_airtime_int(params.ack_bits, params.basic_rate_bps, params)


def dcf_category(params: ProtocolParams) -> AccessCategory:
    return AccessCategory("be", params.cw_min, params.cw_max, params.difs_us)


def edca_categories(params: ProtocolParams):
    slot, sifs = params.mini_slot_us, params.sifs_us
    vo = AccessCategory("vo", params.edca_vo_cw_min, params.edca_vo_cw_max,
                        sifs + params.edca_vo_aifsn * slot, priority=1, txop_us=params.edca_vo_txop_us)
    be = AccessCategory("be", params.edca_be_cw_min, params.edca_be_cw_max,
                        sifs + params.edca_be_aifsn * slot, priority=0)
    return {"vo": vo, "be": be}


class ContentionMac:
    """DCF-style engine over per-node, per-category FIFO queues.

    ``world`` supplies the nodes, traffic event queue, radios and statistics
    (see ``scenario.World``). All radios stay awake for the whole run.
    """

    def __init__(self, world, categories: dict):
        self.w = world
        self.p = world.params
        self.cats = categories
        self.chan = CsmaChannel(self.p.mini_slot_us, world.rng_mac)
        self.medium = Medium(world.radios)
        self.queues = {(n.id, c): [] for n in world.nodes for c in categories}
        self.t_data = data_airtime(self.p)
        self.t_voice = voice_airtime(self.p)
        self.t_ack = ack_airtime(self.p)

    def category_for(self, kind):
        if kind == "voice" and "vo" in self.cats:
            return self.cats["vo"]
        return self.cats["be"]

    def frame_time(self, kind):
        return self.t_voice if kind == "voice" else self.t_data

    def _drop_expired(self, key, t):
        q = self.queues[key]
        dm = self.p.D_M_us
        while q and q[0].kind == "voice" and t - q[0].ready_us > dm:
            pkt = q.pop(0)
            self.w.stats.expire(pkt.ready_us, pkt.src)

    def on_packet(self, pkt: Packet, t):
        ac = self.category_for(pkt.kind)
        self.queues[(pkt.src, ac.name)].append(pkt)
        self.chan.activate(pkt.src, ac, t)

    def run(self, t_end):
        w, chan, p = self.w, self.chan, self.p
        marked = False
        while True:
            t_tx, firing = chan.next_access()
            t_arr = w.events.peek_time()
            if t_arr <= t_tx and t_arr < t_end:
                t, node, kind, payload = w.events.pop()
                for pkt in w.emit(t, node, kind, payload):
                    self.on_packet(pkt, t)
                continue
            if not marked and chan.idle_start >= w.warmup_us:
                self.medium.mark(chan.idle_start)
                w.stats.window_start = chan.idle_start
                marked = True
            if t_tx == math.inf or t_tx >= t_end:
                break
            # voice frames past their deadline leave before the medium is used
            stale = False
            for c in firing:
                q = self.queues[c.key]
                self._drop_expired(c.key, t_tx)
                if not q:
                    stale = True
            if stale:
                for c in list(firing):
                    if not self.queues[c.key]:
                        chan.deactivate(c.key)
                continue
            tx, losers = chan.resolve_internal(firing)
            if len(tx) == 1:
                busy_end = self._exchange(tx[0], t_tx, t_end)
                if busy_end is None:
                    break
                chan.busy(t_tx, busy_end, firing)
                chan.success(tx[0], busy_end, bool(self.queues[tx[0].key]))
            else:
                dur = {c.node: self.frame_time(self.queues[c.key][0].kind) for c in tx}
                busy_end = max(dur.values()) + t_tx + p.sifs_us + self.t_ack
                if busy_end > t_end:
                    break
                self.medium.frame(t_tx, dur)
                chan.busy(t_tx, busy_end, firing)
                for c in tx:
                    chan.failure(c, busy_end)
            for c in losers:
                chan.failure(c, busy_end)
        if not marked:
            self.medium.mark(t_end)
            w.stats.window_start = t_end
        self.medium.finish(t_end)
        w.window_end = t_end
        w.queued_at_end = sum(len(q) for q in self.queues.values())

    def _exchange(self, c, t, t_end):
        """Successful channel access: one frame, or a voice TXOP burst.

        Returns the end of the last acknowledgement, or None when not even
        the first frame fits before ``t_end``.
        """
        q = self.queues[c.key]
        p = self.p
        budget = c.ac.txop_us
        start = t
        last_end = None
        while q:
            pkt = q[0]
            ft = self.frame_time(pkt.kind)
            end = t + ft + p.sifs_us + self.t_ack
            if end > t_end or (last_end is not None and end - start > budget):
                break
            self.medium.frame(t, {pkt.src: ft})
            self.medium.frame(t + ft + p.sifs_us, {pkt.dst: self.t_ack})
            q.pop(0)
            self.w.stats.deliver(pkt.ready_us, t + ft, pkt.src, pkt.kind)
            last_end = end
            if not budget:
                break
            self._drop_expired(c.key, end + p.sifs_us)
            t = end + p.sifs_us
        return last_end
