"""Infrastructure manager for a hybrid private/public model-serving cloud.

The package pairs a session-assigning resource broker and a health-driven
load balancer with a deterministic discrete-event cloud simulator, so that
placement, overflow, reverse migration, instance replacement and broker
crash recovery can be exercised end to end.
"""

from evop.errors import EvopError
from evop.harness import MetricsReport, Simulation, diff_traces, run_scenario
from evop.scenario import ScenarioSpec, parse_scenario

__all__ = [
    "EvopError",
    "MetricsReport",
    "ScenarioSpec",
    "Simulation",
    "diff_traces",
    "parse_scenario",
    "run_scenario",
]

__version__ = "0.1.0"
