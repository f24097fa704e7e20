"""Energy-efficient scheduled MAC for single-hop ad hoc networks: protocol
parameters, realtime-loss Markov analysis and a packet-level simulator."""

from .core import ConfigError, ContractViolation, InfeasibleParameters, ProtocolParams

__version__ = "0.1.0"
__all__ = ["ConfigError", "ContractViolation", "InfeasibleParameters", "ProtocolParams"]
