import math

import numpy as np
import pytest

from headmac.analytic import ChainParams
from headmac.contention import contention_pmf_exact
from headmac.core import ConfigError, ProtocolParams
from headmac.sim import ScenarioConfig, run_scenario
from headmac.sim.contention_mac import ContentionMac, ack_airtime, data_airtime, dcf_category
from headmac.sim.engine import ChannelConflict, EventQueue, Medium, Radio, RadioAsleep
from headmac.sim.metrics import RunMetrics, fmt
from headmac.sim.proposed import ProposedMac
from headmac.sim.psm import PsmMac
from headmac.sim.scenario import World

P = ProtocolParams()
SHORT = dict(duration_s=6.0, warmup_s=1.0)


def cfg(**kw):
    base = dict(SHORT)
    base.update(kw)
    return ScenarioConfig(**base)


# --- engine pieces -------------------------------------------------------------

def test_event_order_ties():
    q = EventQueue()
    q.push(5, 2, "data")
    q.push(5, 1, "data")
    q.push(5, 1, "voice")
    q.push(3, 9, "data")
    assert [q.pop()[:3] for _ in range(4)] == [(3, 9, "data"), (5, 1, "voice"), (5, 1, "data"), (5, 2, "data")]


def test_medium_rejects_overlap():
    radios = [Radio(P) for _ in range(3)]
    m = Medium(radios)
    m.frame(0, {0: 100})
    with pytest.raises(ChannelConflict):
        m.frame(50, {1: 100})


def test_medium_collision_and_receivers():
    radios = [Radio(P) for _ in range(3)]
    m = Medium(radios)
    m.frame(0, {0: 100, 1: 60})
    assert m.n_collided == 1
    assert radios[2].ledger.time_us["receive"] == 100
    assert radios[1].ledger.time_us["transmit"] == 60


def test_sleeping_radio_cannot_send():
    r = Radio(P)
    r.sleep(0)
    with pytest.raises(RadioAsleep):
        r.busy(10, 5, "transmit")


def test_metrics_formatting():
    assert fmt(math.inf) == "inf"
    assert fmt(3) == "3"
    m = RunMetrics("dcf", 10, 0, 0.0, 0.0, 1, throughput=10.0, energy_per_packet=5 / 100,
                   mean_delay=0.1, realtime_loss_rate=0.0, total_energy=5.0, window_s=10.0)
    assert m.total_power == 0.5
    assert m.csv_row().split(",")[7] == "0.05"


# --- whole runs --------------------------------------------------------------

@pytest.mark.parametrize("proto", ["proposed", "psm", "dcf", "edca"])
def test_zero_load(proto):
    m = run_scenario(cfg(protocol=proto, K=6))
    assert m.throughput == 0
    assert m.energy_per_packet == math.inf
    assert m.mean_delay == math.inf
    assert m.realtime_loss_rate == 0.0


def test_dcf_zero_load_energy_is_idle():
    m = run_scenario(cfg(protocol="dcf", K=7))
    assert m.total_energy == pytest.approx(P.power_idle_w * m.window_s * 7, rel=1e-12)


def test_proposed_idle_network_awake_time():
    w = World(cfg(protocol="proposed", K=10), voice_events=False)
    mac = ProposedMac(w)
    mac.run()
    n_beacons = w.end_us // P.T_nb_us
    A0 = mac.announcement_time(0)
    for i, r in enumerate(w.radios):
        awake = r.ledger.total_us - r.ledger.time_us["sleep"]
        if i == mac.head:
            assert awake == w.end_us
        else:
            assert awake == n_beacons * A0


@pytest.mark.parametrize("proto", ["proposed", "psm", "dcf", "edca"])
def test_light_load_is_delivered(proto):
    m = run_scenario(ScenarioConfig(protocol=proto, K=10, load=200, duration_s=12, warmup_s=2))
    assert m.throughput == pytest.approx(200, rel=0.07)


@pytest.mark.parametrize("proto", ["proposed", "psm", "dcf", "edca"])
@pytest.mark.parametrize("N, load", [(0, 1500), (3, 300)])
def test_conservation(proto, N, load):
    m = run_scenario(cfg(protocol=proto, K=8, N=N, load=load))
    e = m.extra
    assert e["generated"] == e["delivered"] + e["expired"] + e["queued"]


def test_conservation_per_node_dcf():
    w = World(cfg(protocol="dcf", K=6, N=2, load=2000), voice_events=True)
    mac = ContentionMac(w, {"be": dcf_category(P)})
    mac.run(w.end_us)
    for n in w.nodes:
        c = w.stats.per_node.get(n.id, {"generated": 0, "delivered": 0, "expired": 0})
        queued = sum(len(q) for (i, _), q in mac.queues.items() if i == n.id)
        assert c["generated"] == c["delivered"] + c["expired"] + queued


def test_conservation_per_node_proposed():
    w = World(cfg(protocol="proposed", K=6, N=0, load=3000), voice_events=False)
    ProposedMac(w).run()
    for n in w.nodes:
        c = w.stats.per_node.get(n.id, {"generated": 0, "delivered": 0, "expired": 0})
        assert c["generated"] == c["delivered"] + c["expired"] + len(n.queue)


@pytest.mark.parametrize("proto", ["proposed", "psm", "edca"])
def test_determinism(proto):
    c = cfg(protocol=proto, K=8, N=2, load=800, seed=7)
    a, b = run_scenario(c), run_scenario(c)
    assert a.as_dict() == b.as_dict()
    assert a.csv_row() == b.csv_row()
    assert run_scenario(c.with_(seed=8)).csv_row() != a.csv_row()


def test_energy_by_mode_sums_to_nodes():
    m = run_scenario(cfg(protocol="proposed", K=8, N=2, load=500))
    assert sum(m.node_energy) == pytest.approx(m.total_energy)
    assert sum(m.energy_by_mode.values()) == pytest.approx(m.total_energy)


def test_contention_period_never_short(monkeypatch):
    seen = []
    orig = ProposedMac.contention_period

    def spy(self, t_start, t_end, candidates, on_success, late_joiners=None):
        if late_joiners is not None:
            seen.append(t_end - t_start)
        return orig(self, t_start, t_end, candidates, on_success, late_joiners)

    monkeypatch.setattr(ProposedMac, "contention_period", spy)
    run_scenario(cfg(protocol="proposed", K=10, N=3, load=5000))
    assert seen and min(seen) >= P.min_contention_us


def test_realtime_frame_must_fit():
    with pytest.raises(ConfigError):
        cfg(protocol="proposed", K=4, N=2, T_rf_ms=60.0).validate()


def test_dcf_single_node_closed_form():
    c = ScenarioConfig(protocol="dcf", K=2, N=0, load=20000, duration_s=10, warmup_s=1)
    w = World(c, voice_events=True)
    w.nodes[1].kind = "idle"
    w.nodes[1].source = None
    w.events = EventQueue()
    w.events.push(w.nodes[0].source.next_us, 0, "data")
    ContentionMac(w, {"be": dcf_category(P)}).run(w.end_us)
    from headmac.sim.metrics import measure
    m = measure(w, "dcf")
    cycle = P.difs_us + 7.5 * P.mini_slot_us + data_airtime(P) + P.sifs_us + ack_airtime(P)
    assert data_airtime(P) == 952 and ack_airtime(P) == 248
    assert m.throughput == pytest.approx(1e6 / cycle, rel=0.015)


def test_edca_voice_only_no_loss():
    m = run_scenario(ScenarioConfig(protocol="edca", K=10, N=5, duration_s=15, warmup_s=2))
    assert m.delivered_rt > 0
    assert m.realtime_loss_rate < 0.001


def test_psm_idle_awake_is_atim():
    w = World(cfg(protocol="psm", K=5, atim_ms=4.0), voice_events=True)
    PsmMac(w, 4.0).run()
    n_beacons = w.end_us // P.T_nb_us
    for r in w.radios:
        assert r.ledger.time_us["idle"] == n_beacons * 4000
        assert r.ledger.time_us["transmit"] == 0


def test_psm_full_window_is_dcf():
    a = run_scenario(cfg(protocol="psm", K=10, load=1500, atim_ms=P.T_nb_ms))
    b = run_scenario(cfg(protocol="dcf", K=10, load=1500))
    assert (a.throughput, a.total_energy, a.mean_delay) == (b.throughput, b.total_energy, b.mean_delay)


def test_psm_single_pair_awake_full_beacon():
    c = cfg(protocol="psm", K=5, load=0, atim_ms=4.0)
    w = World(c, voice_events=True)
    # one packet for node 0 right at the start of a beacon
    from headmac.core import PoissonSource
    w.nodes[0].kind = "data"
    w.nodes[0].source = PoissonSource(0.0, np.random.default_rng(0))
    w.events.push(2_000_000 + 100, 0, "data")
    PsmMac(w, 4.0).run()
    dst = w.nodes[0].dest
    awake = [r.ledger.total_us - r.ledger.time_us["sleep"] for r in w.radios]
    n_beacons = w.end_us // P.T_nb_us
    base = n_beacons * 4000
    for i in range(5):
        if i in (0, dst):
            assert awake[i] == base + P.T_nb_us - 4000
        else:
            assert awake[i] == base
    assert w.stats.delivered_total == 1


def test_nominee_failure_retains_head():
    w = World(cfg(protocol="proposed", K=6, load=1000, nominee_fail_prob=1.0), voice_events=False)
    mac = ProposedMac(w)
    head = mac.head
    mac.run()
    assert mac.head == head
    assert mac.counters["head_changes"] == 0
    assert mac.counters["nominee_failures"] > 0
    w2 = World(cfg(protocol="proposed", K=6, load=1000), voice_events=False)
    mac2 = ProposedMac(w2)
    mac2.run()
    assert mac2.counters["head_changes"] > 0


def test_schedule_overflow_keeps_entries():
    w = World(cfg(protocol="proposed", K=10, load=8000), voice_events=False)
    mac = ProposedMac(w)
    mac.run()
    assert mac.counters["deferred_entries"] > 0
    # entries with unserved demand are still in the table, none dropped
    for i, n in mac.nrt_table.items():
        assert n > 0 and w.nodes[i].queue


def test_one_call_one_grant():
    c = cfg(protocol="proposed", K=2, N=1, T_rf_ms=2.0)
    w = World(c, voice_events=False)
    mac = ProposedMac(w)
    mac.keep_grant_log = True
    mac.run()
    per_beacon = {}
    for kind, i, t, d in mac.grant_log:
        assert kind == "rt" and i == 0
        per_beacon[t // P.T_rb_us] = per_beacon.get(t // P.T_rb_us, 0) + 1
    assert per_beacon and max(per_beacon.values()) == 1


def test_sim_contention_matches_exact_dp():
    # rts of 196 bits makes the request exchange exactly 15 mini-slots
    p = P.with_(rts_bits=196)
    cp = ChainParams.from_protocol(p, 1, 0)
    assert cp.t_q == 15
    W, T_cp, n = p.contention_window_W, 80, 4
    w = World(ScenarioConfig(protocol="proposed", K=n + 1, duration_s=1, warmup_s=0, params=p),
              voice_events=False)
    mac = ProposedMac(w)
    mac.head = n
    assert mac.t_q == 300
    wins = []
    trials = 20000
    counts = np.zeros(n + 1)
    for k in range(trials):
        t0 = k * 10_000
        got = []
        mac.contention_period(t0, t0 + T_cp * p.mini_slot_us, list(range(n)), lambda i, t: got.append(i))
        counts[len(got)] += 1
    emp = counts / trials
    want = np.asarray(contention_pmf_exact(n, T_cp, W, cp.t_q))
    sd = np.sqrt(want * (1 - want) / trials)
    assert np.all(np.abs(emp - want) <= 5 * sd + 1e-3)


def test_collision_then_retry_next_beacon():
    # two contenders with forced equal backoff collide and both come back later
    w = World(cfg(protocol="proposed", K=3), voice_events=False)
    mac = ProposedMac(w)
    mac.head = 2
    mac.chan.draw = lambda cw: 3
    got = []
    mac.contention_period(0, 5000, [0, 1], lambda i, t: got.append(i))
    assert got == [] and mac.counters["rts_collided"] == 1
    mac.contention_period(10_000, 15_000, [0], lambda i, t: got.append(i))
    assert got == [0]
