"""Scenario description, simulated world set-up and the run entry point."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from ..core import (
    ConfigError,
    OnOffCall,
    PARAM_FIELDS,
    PoissonSource,
    ProtocolParams,
)
from .engine import EventQueue, Packet, Radio, Stats

PROTOCOLS = ("proposed", "psm", "dcf", "edca")
VOICE_SWITCHING = ("continuous", "beacon")
DEFAULT_ATIM_MS = 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    protocol: str = "proposed"
    K: int = 10
    N: int = 0                 # realtime (voice) senders among the K nodes
    load: float = 0.0          # aggregate non-realtime packets/s over the data nodes
    seed: int = 1
    duration_s: float = 20.0
    warmup_s: float = 2.0
    atim_ms: float | None = None
    T_rf_ms: float | None = None
    delta_star: float = 0.01
    nominee_fail_prob: float = 0.0
    voice_switching: str = "continuous"   # or "beacon": calls change mode only at realtime beacon starts
    params: ProtocolParams = field(default_factory=ProtocolParams)

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.K < 1 or self.N < 0 or self.N > self.K:
            raise ConfigError(f"need 0 <= N <= K and K >= 1 (K={self.K}, N={self.N})")
        if self.K < 2 and (self.load > 0 or self.N > 0):
            raise ConfigError("traffic needs at least two nodes")
        if self.load < 0:
            raise ConfigError("load must be non-negative")
        if self.load > 0 and self.N == self.K:
            raise ConfigError("non-realtime load given but every node carries voice")
        if self.duration_s <= 0 or not (0 <= self.warmup_s < self.duration_s):
            raise ConfigError("need duration_s > warmup_s >= 0")
        p = self.params
        if self.T_rf_ms is not None:
            if self.T_rf_ms < 0 or self.T_rf_ms >= p.T_rb_ms:
                raise ConfigError(f"T_rf_ms={self.T_rf_ms} must lie in [0, T_rb_ms={p.T_rb_ms})")
            if p.T_rb_ms - self.T_rf_ms < p.min_contention_ms and p.beta == 1:
                raise ConfigError("realtime frame leaves less than the minimum contention period")
        if self.atim_ms is not None and not (0 < self.atim_ms <= p.T_nb_ms):
            raise ConfigError("atim_ms must lie in (0, T_nb_ms]")
        if self.voice_switching not in VOICE_SWITCHING:
            raise ConfigError(f"voice_switching must be one of {VOICE_SWITCHING}")
        if not (0 <= self.nominee_fail_prob <= 1):
            raise ConfigError("nominee_fail_prob must be a probability")
        return self

    def with_(self, **kw):
        from dataclasses import replace
        return replace(self, **kw)


SCENARIO_FIELDS = {f.name: f.type for f in fields(ScenarioConfig) if f.name != "params"}


def _coerce(raw: str, typ):
    typ = str(typ)
    if raw.lower() in ("none", ""):
        return None
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    if typ.startswith("str"):
        return raw
    return float(raw)


def parse_config_text(text: str) -> ScenarioConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    pkw, skw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        try:
            if key in PARAM_FIELDS:
                pkw[key] = _coerce(val, PARAM_FIELDS[key])
            elif key in SCENARIO_FIELDS:
                skw[key] = _coerce(val, SCENARIO_FIELDS[key])
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    if "T_rb_ms" in pkw or "beta" in pkw:
        if "T_nb_ms" not in pkw:
            pkw["T_nb_ms"] = pkw.get("T_rb_ms", ProtocolParams.T_rb_ms) * pkw.get("beta", ProtocolParams.beta)
    try:
        params = ProtocolParams(**pkw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ScenarioConfig(params=params, **skw).validate()


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: ScenarioConfig) -> str:
    lines = [f"{k} = {getattr(cfg, k)}" for k in SCENARIO_FIELDS]
    lines += [f"{k} = {getattr(cfg.params, k)}" for k in PARAM_FIELDS]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


@dataclass
class Node:
    id: int
    kind: str                  # "voice", "data" or "idle"
    dest: int
    source: object = None
    queue: deque = field(default_factory=deque)


class World:
    """Nodes, traffic, radios and counters for one run.

    ``voice_events`` selects whether voice packets are pushed to the event
    queue one by one (contention MACs) or pulled per beacon by the engine.
    """

    def __init__(self, config: ScenarioConfig, voice_events: bool):
        self.config = config
        self.params = p = config.params
        ss = np.random.SeedSequence(config.seed)
        setup_ss, mac_ss, *node_ss = ss.spawn(2 + config.K)
        setup = np.random.default_rng(setup_ss)
        self.rng_mac = np.random.default_rng(mac_ss)
        K, N = config.K, config.N
        self.nodes = []
        n_data = K - N
        rate = config.load / n_data if n_data and config.load > 0 else 0.0
        grid = p.T_rb_us if config.voice_switching == "beacon" else None
        for i in range(K):
            others = [j for j in range(K) if j != i]
            dest = int(setup.choice(others)) if others else i
            rng = np.random.default_rng(node_ss[i])
            if i < N:
                node = Node(i, "voice", dest, OnOffCall(p, rng, switch_grid_us=grid))
            elif rate > 0:
                node = Node(i, "data", dest, PoissonSource(rate, rng))
            else:
                node = Node(i, "idle", dest)
            self.nodes.append(node)
        self.radios = [Radio(p) for _ in range(K)]
        self.stats = Stats()
        self.events = EventQueue()
        self.voice_events = voice_events
        self.warmup_us = int(round(config.warmup_s * 1e6))
        self.end_us = int(round(config.duration_s * 1e6))
        self.window_end = self.end_us
        self.queued_at_end = 0
        self.extra = {}
        for n in self.nodes:
            if n.kind == "data":
                self.events.push(n.source.next_us, n.id, "data")
            elif n.kind == "voice" and voice_events:
                self.events.push(n.source.next_packet(), n.id, "voice")

    def emit(self, t, node_id, kind, payload=None):
        n = self.nodes[node_id]
        if kind == "data":
            n.source.arrivals_until(t)
            self.events.push(n.source.next_us, node_id, "data")
        else:
            self.events.push(n.source.next_packet(), node_id, "voice")
        self.stats.generated(node_id)
        return [Packet(node_id, n.dest, t, kind)]

    def pump(self, t):
        """Move every queued traffic event up to and including ``t`` into node queues."""
        while self.events.peek_time() <= t:
            te, nid, kind, payload = self.events.pop()
            for pkt in self.emit(te, nid, kind, payload):
                self.nodes[nid].queue.append(pkt)

    def conservation(self):
        s = self.stats
        return {"generated": s.generated_total, "delivered": s.delivered_total,
                "expired": s.expired_total, "queued": self.queued_at_end}


def run_scenario(config: ScenarioConfig):
    """Simulate one scenario and return its ``RunMetrics``."""
    from .contention_mac import ContentionMac, dcf_category, edca_categories
    from .metrics import measure
    from .proposed import ProposedMac
    from .psm import PsmMac

    config.validate()
    proto = config.protocol
    if proto == "psm" and config.atim_ms is None:
        config = config.with_(atim_ms=DEFAULT_ATIM_MS)
    if proto == "dcf":
        w = World(config, voice_events=True)
        ContentionMac(w, {"be": dcf_category(w.params)}).run(w.end_us)
    elif proto == "edca":
        w = World(config, voice_events=True)
        ContentionMac(w, edca_categories(w.params)).run(w.end_us)
    elif proto == "psm":
        w = World(config, voice_events=True)
        PsmMac(w, atim_ms=config.atim_ms).run()
    else:
        w = World(config, voice_events=False)
        ProposedMac(w).run()
    m = measure(w, proto)
    m.extra.update(w.conservation())
    return m
