"""Trace-driven simulator of a host CPU next to 3D-stacked memory with PIM logic."""

from .coherence import Mechanism
from .engine import MetricsReport, SimulationError, Simulator, compare_mechanisms, simulate
from .machine import ConfigError, EventKind, MachineConfig, load_config
from .trace import Trace, parse_trace, write_trace
from .xlat import PageTableMode

__all__ = [
    "ConfigError",
    "EventKind",
    "MachineConfig",
    "Mechanism",
    "MetricsReport",
    "PageTableMode",
    "SimulationError",
    "Simulator",
    "Trace",
    "compare_mechanisms",
    "load_config",
    "parse_trace",
    "simulate",
    "write_trace",
]
