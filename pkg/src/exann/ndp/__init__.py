"""Near-data processing cost model: placement, caches, replay, sweeps."""

from exann.ndp.caches import LncD, LncT
from exann.ndp.layout import NdpLayout, assign_homes, load_layout, map_database, save_layout
from exann.ndp.sim import SimStats, expected_vector_bursts, latency_breakdown, simulate
from exann.ndp.sweep import SweepConfig, sweep
from exann.ndp.topology import NdpTopology, load_topology, save_topology

__all__ = [
    "LncD",
    "LncT",
    "NdpLayout",
    "NdpTopology",
    "SimStats",
    "SweepConfig",
    "assign_homes",
    "expected_vector_bursts",
    "latency_breakdown",
    "load_layout",
    "load_topology",
    "map_database",
    "save_layout",
    "save_topology",
    "simulate",
    "sweep",
]
