from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from ..core import MODES

INF_MARKER = "inf"

CSV_HEADER = ("protocol,K,N,load_pkts_s,atim_ms,seed,throughput,energy_per_pkt_J,"
              "mean_delay_s,rt_loss_rate,total_energy_J")


@dataclass
class RunMetrics:
    protocol: str
    K: int
    N: int
    load_pkts_s: float
    atim_ms: float
    seed: int
    throughput: float            # delivered packets per second
    energy_per_packet: float     # J per delivered packet, inf if none
    mean_delay: float            # s, inf if nothing delivered
    realtime_loss_rate: float    # 0 when no realtime unit was generated
    total_energy: float          # J over the measurement window
    window_s: float
    energy_by_mode: dict = field(default_factory=dict)
    node_energy: list = field(default_factory=list)
    delivered: int = 0
    delivered_nrt: int = 0
    delivered_rt: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def total_power(self) -> float:
        return self.total_energy / self.window_s if self.window_s else math.nan

    @property
    def nrt_throughput(self) -> float:
        return self.delivered_nrt / self.window_s if self.window_s else 0.0

    def csv_row(self) -> str:
        return ",".join([
            self.protocol, str(self.K), str(self.N), fmt(self.load_pkts_s), fmt(self.atim_ms),
            str(self.seed), fmt(self.throughput), fmt(self.energy_per_packet), fmt(self.mean_delay),
            fmt(self.realtime_loss_rate), fmt(self.total_energy),
        ])

    def as_dict(self):
        return asdict(self)


def fmt(x) -> str:
    if isinstance(x, int) and not isinstance(x, bool):
        return str(x)
    if x is None:
        return ""
    x = float(x)
    if math.isinf(x):
        return INF_MARKER if x > 0 else "-" + INF_MARKER
    if math.isnan(x):
        return "nan"
    return f"{x:.12g}"


def measure(world, protocol_label: str) -> RunMetrics:
    """Collapse a finished run into the reported metrics."""
    s = world.stats
    t0, t1 = s.window_start, world.window_end
    window_s = (t1 - t0) / 1e6
    by_mode = dict.fromkeys(MODES, 0.0)
    node_energy = []
    p = world.params
    for r in world.radios:
        base = r.mark or dict.fromkeys(MODES, 0)
        e = 0.0
        for m in MODES:
            dt = r.ledger.time_us[m] - base[m]
            by_mode[m] += dt * p.power(m) / 1e6
            e += dt * p.power(m) / 1e6
        node_energy.append(e)
    total = sum(node_energy)
    n = s.delivered
    thr = n / window_s if window_s > 0 else 0.0
    epp = total / n if n else math.inf
    delay = s.delay_sum_us / n / 1e6 if n else math.inf
    rt_fate = s.rt_ok + s.rt_lost
    loss = s.rt_lost / rt_fate if rt_fate else 0.0
    sc = world.config
    return RunMetrics(
        protocol=protocol_label, K=sc.K, N=sc.N, load_pkts_s=sc.load,
        atim_ms=sc.atim_ms if sc.atim_ms is not None else 0.0,
        seed=sc.seed, throughput=thr, energy_per_packet=epp, mean_delay=delay,
        realtime_loss_rate=loss, total_energy=total, window_s=window_s,
        energy_by_mode=by_mode, node_energy=node_energy, delivered=n,
        delivered_nrt=s.delivered_nrt, delivered_rt=s.delivered_rt,
        extra=dict(world.extra),
    )
