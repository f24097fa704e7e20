import pytest

from headmac.cli import ExperimentSpec, parse_experiment_text
from headmac.core import ConfigError, InfeasibleParameters, ProtocolParams
from headmac.sim import ScenarioConfig, load_config, parse_config_text
from headmac.sim.scenario import dump_config


def test_scenario_parse():
    c = parse_config_text("""
        # a comment
        protocol = psm
        K = 20
        load = 800   # trailing comment
        atim_ms = 4
        contention_window_W = 16
    """)
    assert (c.protocol, c.K, c.load, c.atim_ms) == ("psm", 20, 800.0, 4.0)
    assert c.params.contention_window_W == 16


def test_scenario_unknown_key():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("protocol = dcf\nbogus = 1\n")


def test_scenario_bad_value():
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("K = ten\n")


def test_scenario_missing_equals():
    with pytest.raises(ConfigError):
        parse_config_text("protocol dcf\n")


@pytest.mark.parametrize("kw", [
    dict(protocol="tdma"), dict(K=4, N=5), dict(load=-1.0), dict(K=3, N=3, load=10.0),
    dict(duration_s=2.0, warmup_s=2.0), dict(T_rf_ms=50.0), dict(atim_ms=0.0),
    dict(voice_switching="sometimes"), dict(nominee_fail_prob=1.5),
])
def test_scenario_validation(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw).validate()


def test_beacon_ratio_is_kept_consistent():
    c = parse_config_text("T_rb_ms = 25\n")
    assert c.params.T_nb_ms == 50.0
    with pytest.raises(ConfigError):
        parse_config_text("T_rb_ms = 25\nT_nb_ms = 60\n")
    with pytest.raises(InfeasibleParameters):
        ProtocolParams(T_rb_ms=60.0, T_nb_ms=120.0)


def test_dump_load_round_trip(tmp_path):
    c = ScenarioConfig(protocol="proposed", K=12, N=3, load=250.5, seed=9, T_rf_ms=3.2,
                       voice_switching="beacon", params=ProtocolParams(contention_window_W=16))
    path = tmp_path / "s.cfg"
    path.write_text(dump_config(c))
    assert load_config(path) == c


def test_experiment_parse():
    spec = parse_experiment_text("""
        kind = throughput_vs_load
        protocols = proposed, dcf
        loads = 100, 200
        K = 10
        reps = 2
        mini_slot_us = 20
    """)
    assert spec.protocols == ("proposed", "dcf")
    assert spec.loads == (100.0, 200.0)
    assert spec.K == (10,)
    assert spec.reps == 2


@pytest.mark.parametrize("text", [
    "protocols = dcf\n",                              # no kind
    "kind = nonsense\n",
    "kind = throughput_vs_load\nloads =\n",          # empty grid
    "kind = throughput_vs_load\nprotocols = aloha\n",
    "kind = loss_vs_Trf\nN = 4\n",                     # no frame grid
    "kind = throughput_vs_load\nfoo = 1\n",
    "kind = throughput_vs_load\nreps = 0\n",
])
def test_experiment_rejects(text):
    with pytest.raises(ConfigError):
        parse_experiment_text(text)


def test_switching_default():
    assert ExperimentSpec(kind="loss_vs_Trf", N=(4,), T_rf_slots=(100,)).switching == "beacon"
    assert ExperimentSpec(kind="mixed_traffic").switching == "continuous"
