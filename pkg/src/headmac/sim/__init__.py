"""Discrete-event simulation of the scheduled MAC and its contention baselines."""

from .metrics import CSV_HEADER, RunMetrics
from .scenario import PROTOCOLS, ScenarioConfig, load_config, parse_config_text, run_scenario

__all__ = ["CSV_HEADER", "PROTOCOLS", "RunMetrics", "ScenarioConfig", "load_config",
           "parse_config_text", "run_scenario"]
