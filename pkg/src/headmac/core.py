"""Shared time base, protocol constants, traffic sources and energy bookkeeping.

All simulated time is kept in integer microseconds. Analytical quantities
(aggregate payload, airtimes) are returned as exact ``Fraction`` values so
callers can decide where rounding happens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation is called outside its precondition."""


class InfeasibleParameters(ValueError):
    pass


class ConfigError(ValueError):
    pass


MODES = ("transmit", "receive", "idle", "sleep")


@dataclass(frozen=True)
class ProtocolParams:
    # timing (µs)
    mini_slot_us: int = 20
    sifs_us: int = 10
    difs_us: int = 50
    phy_preamble_us: int = 192
    # rates (bit/s)
    data_rate_bps: int = 11_000_000
    basic_rate_bps: int = 2_000_000
    # contention
    contention_window_W: int = 32
    cw_min: int = 15
    cw_max: int = 1023
    # frame sizes (bits)
    rts_bits: int = 160
    cts_bits: int = 112
    ack_bits: int = 112
    atim_bits: int = 224
    atim_ack_bits: int = 112
    sched_entry_bits: int = 160
    sched_header_bits: int = 160
    # beacon structure (ms)
    T_rb_ms: float = 50.0
    T_nb_ms: float = 100.0
    beta: int = 2
    D_M_ms: float = 50.0
    min_contention_ms: float = 2.0
    # radio power draw (W)
    power_tx_w: float = 2.25
    power_rx_w: float = 1.25
    power_idle_w: float = 1.25
    power_sleep_w: float = 0.075
    # voice traffic
    t_on_s: float = 1.8
    t_off_s: float = 1.2
    t_a_ms: float = 20.0
    voice_payload_bytes: int = 160
    udp_bytes: int = 8
    rtp_bytes: int = 12
    ip_bytes: int = 20
    mac_bytes: int = 20
    # non-realtime traffic
    data_packet_bits: int = 1024 * 8
    # EDCA access categories: voice / best effort
    edca_vo_cw_min: int = 3
    edca_vo_cw_max: int = 7
    edca_vo_aifsn: int = 2
    edca_vo_txop_us: int = 1504
    edca_be_cw_min: int = 15
    edca_be_cw_max: int = 1023
    edca_be_aifsn: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.beta < 1 or int(self.beta) != self.beta:
            raise InfeasibleParameters(f"beta must be an integer >= 1, got {self.beta}")
        if not math.isclose(self.T_nb_ms, self.beta * self.T_rb_ms):
            raise InfeasibleParameters(
                f"T_nb_ms={self.T_nb_ms} must equal beta*T_rb_ms={self.beta * self.T_rb_ms}")
        if self.T_rb_ms > self.D_M_ms:
            raise InfeasibleParameters("realtime beacon longer than the maximum packet delay")
        if not (self.power_sleep_w < self.power_idle_w <= self.power_rx_w <= self.power_tx_w):
            raise InfeasibleParameters("power draws must satisfy sleep < idle <= rx <= tx")
        if self.contention_window_W < 1:
            raise InfeasibleParameters("contention window W must be >= 1")
        for name in ("mini_slot_us", "phy_preamble_us", "data_rate_bps", "basic_rate_bps",
                     "T_rb_ms", "t_on_s", "t_off_s", "t_a_ms"):
            if getattr(self, name) <= 0:
                raise InfeasibleParameters(f"{name} must be positive")
        for name in ("sifs_us", "difs_us", "min_contention_ms"):
            if getattr(self, name) < 0:
                raise InfeasibleParameters(f"{name} must be non-negative")

    def with_(self, **kw) -> "ProtocolParams":
        return replace(self, **kw)

    # derived durations in integer µs
    @property
    def T_rb_us(self) -> int:
        return ms_to_us(self.T_rb_ms)

    @property
    def T_nb_us(self) -> int:
        return ms_to_us(self.T_nb_ms)

    @property
    def D_M_us(self) -> int:
        return ms_to_us(self.D_M_ms)

    @property
    def t_a_us(self) -> int:
        return ms_to_us(self.t_a_ms)

    @property
    def min_contention_us(self) -> int:
        return ms_to_us(self.min_contention_ms)

    @property
    def voice_packet_bits(self) -> int:
        return 8 * self.voice_payload_bytes

    @property
    def voice_overhead_bits(self) -> int:
        """UDP + RTP + IP headers carried by every voice packet."""
        return 8 * (self.udp_bytes + self.rtp_bytes + self.ip_bytes)

    @property
    def mac_header_bits(self) -> int:
        return 8 * self.mac_bytes

    def power(self, mode: str) -> float:
        return {
            "transmit": self.power_tx_w,
            "receive": self.power_rx_w,
            "idle": self.power_idle_w,
            "sleep": self.power_sleep_w,
        }[mode]


PARAM_FIELDS = {f.name: f.type for f in fields(ProtocolParams)}


def ms_to_us(t_ms: float) -> int:
    return int(round(t_ms * 1000))


def us_to_minislots(t_us, params: ProtocolParams) -> int:
    """Number of mini-slots needed to cover ``t_us`` (ceiling)."""
    if t_us < 0:
        raise ContractViolation(f"negative duration {t_us}")
    return math.ceil(Fraction(t_us) / params.mini_slot_us)


def frame_airtime_us(bits, rate_bps, params: ProtocolParams) -> Fraction:
    """PHY preamble plus the payload bits at ``rate_bps``, exact."""
    return params.phy_preamble_us + Fraction(bits) * 1_000_000 / rate_bps


def frame_airtime_int(bits, rate_bps, params: ProtocolParams) -> int:
    return math.ceil(frame_airtime_us(bits, rate_bps, params))


def packets_per_beacon(params: ProtocolParams) -> Fraction:
    return Fraction(params.T_rb_us, params.t_a_us)


def aggregate_payload_rho(params: ProtocolParams) -> Fraction:
    """Average voice payload (bits) accumulated over one realtime beacon."""
    return packets_per_beacon(params) * params.voice_packet_bits


def aggregate_bits(params: ProtocolParams, n_packets=None) -> Fraction:
    """Bits in one aggregated realtime frame.

    Each original voice packet keeps its UDP/RTP/IP headers so the receiver can
    split the aggregate; the MAC header is paid once per aggregate.
    ``n_packets=None`` uses the per-beacon average.
    """
    n = packets_per_beacon(params) if n_packets is None else Fraction(n_packets)
    return n * (params.voice_packet_bits + params.voice_overhead_bits) + params.mac_header_bits


def aggregate_tx_time_tv(params: ProtocolParams, n_packets=None) -> Fraction:
    """Airtime of one aggregated realtime frame, SIFS included (µs)."""
    return frame_airtime_us(aggregate_bits(params, n_packets), params.data_rate_bps, params) + params.sifs_us


def request_tx_time_tq(params: ProtocolParams) -> Fraction:
    """Airtime of one transmission request (RTS at basic rate) plus SIFS (µs)."""
    return frame_airtime_us(params.rts_bits, params.basic_rate_bps, params) + params.sifs_us


# ---------------------------------------------------------------------------
# energy


@dataclass
class EnergyLedger:
    """Per-node time spent in each radio mode (integer µs)."""

    params: ProtocolParams = field(default_factory=ProtocolParams, repr=False)
    time_us: dict = field(default_factory=lambda: dict.fromkeys(MODES, 0))

    def accrue(self, mode: str, duration_us: int) -> "EnergyLedger":
        if mode not in self.time_us:
            raise ContractViolation(f"unknown radio mode {mode!r}")
        if duration_us < 0:
            raise ContractViolation(f"negative duration {duration_us} for mode {mode}")
        self.time_us[mode] += duration_us
        return self

    @property
    def total_us(self) -> int:
        return sum(self.time_us.values())

    def joules_by_mode(self) -> dict:
        return {m: t * self.params.power(m) / 1e6 for m, t in self.time_us.items()}

    @property
    def joules(self) -> float:
        return sum(self.joules_by_mode().values())

    def snapshot(self) -> dict:
        return dict(self.time_us)


def accrue_energy(ledger: EnergyLedger, mode: str, duration_us: int) -> EnergyLedger:
    return ledger.accrue(mode, duration_us)


# ---------------------------------------------------------------------------
# traffic


class PoissonSource:
    """Poisson packet arrivals; ``rate`` in packets per second."""

    def __init__(self, rate_pkts_per_s: float, rng: np.random.Generator, start_us: int = 0):
        if rate_pkts_per_s < 0:
            raise ContractViolation("arrival rate must be non-negative")
        self.rate = rate_pkts_per_s
        self.rng = rng
        self.next_us = self._draw(start_us)

    def _draw(self, t_us):
        if self.rate == 0:
            return math.inf
        return t_us + max(1, int(round(self.rng.exponential(1e6 / self.rate))))

    def arrivals_until(self, t_us) -> list:
        """Pop every arrival time <= t_us, in order."""
        out = []
        while self.next_us <= t_us:
            out.append(self.next_us)
            self.next_us = self._draw(self.next_us)
        return out


class OnOffCall:
    """Voice call alternating exponential on/off periods.

    While on, one packet is produced every ``t_a``; the first packet of an on
    period is produced at its start. Times are integer µs.

    With ``switch_grid_us`` set, every period is rounded up to a whole number
    of grid steps, so the call only changes mode on the grid and the number of
    steps per period is geometric with end probability ``1 - exp(-step/mean)``.
    """

    def __init__(self, params: ProtocolParams, rng: np.random.Generator, start_us: int = 0,
                 initially_on=None, switch_grid_us: int | None = None):
        self.params = params
        self.rng = rng
        self.t_a_us = params.t_a_us
        self.grid = switch_grid_us
        self.payload_bits = params.voice_packet_bits
        if initially_on is None:
            p_on = params.t_on_s / (params.t_on_s + params.t_off_s)
            initially_on = bool(rng.random() < p_on)
        self.on = initially_on
        self.mode_start_us = start_us
        self.mode_end_us = start_us + self._duration(self.on)
        self.next_packet_us = start_us if self.on else math.inf
        self.on_durations = []

    @property
    def mode(self):
        return "on" if self.on else "off"

    def _duration(self, on):
        mean_s = self.params.t_on_s if on else self.params.t_off_s
        d = max(1, int(round(self.rng.exponential(mean_s * 1e6))))
        if self.grid:
            d = -(-d // self.grid) * self.grid
        return d

    def _flip(self):
        t = self.mode_end_us
        if self.on:
            self.on_durations.append(t - self.mode_start_us)
        self.on = not self.on
        self.mode_start_us = t
        self.mode_end_us = t + self._duration(self.on)
        self.next_packet_us = t if self.on else math.inf

    def next_packet(self) -> int:
        """Time of the next packet, stepping through mode changes as needed."""
        while True:
            if self.on and self.next_packet_us < self.mode_end_us:
                t = self.next_packet_us
                self.next_packet_us += self.t_a_us
                return t
            self._flip()

    def advance(self, t_us) -> list:
        """Run the call forward to ``t_us`` and return the packet times generated
        since the previous call (half-open interval, ``t_us`` excluded)."""
        out = []
        while True:
            if self.on:
                while self.next_packet_us < min(self.mode_end_us, t_us):
                    out.append(self.next_packet_us)
                    self.next_packet_us += self.t_a_us
            if self.mode_end_us <= t_us:
                self._flip()
            else:
                break
        return out
