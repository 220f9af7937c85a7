"""Fluid-flow simulation of window-based congestion control over FIFO buffer networks."""

from .errors import (DegenerateRatio, FluidError, HistoryUnderrun, NotYetKnown, ProtocolError, ScenarioError,
                     SolverError, TopologyError)
from .scenario import BUILTINS, Scenario, builtin, dump_scenario, dumps_scenario, load_scenario, loads_scenario
from .solver import Equilibrium, Simulation, SimulationConfig, equilibrium, scenario_equilibrium, simulate
from .traces import TraceSet, cumulative_count, max_deviation

__version__ = "0.1.0"

__all__ = [
    "BUILTINS", "DegenerateRatio", "Equilibrium", "FluidError", "HistoryUnderrun", "NotYetKnown", "ProtocolError",
    "Scenario", "ScenarioError", "Simulation", "SimulationConfig", "SolverError", "TopologyError", "TraceSet",
    "builtin", "cumulative_count", "dump_scenario", "dumps_scenario", "equilibrium", "load_scenario",
    "loads_scenario", "max_deviation", "scenario_equilibrium", "simulate",
]
