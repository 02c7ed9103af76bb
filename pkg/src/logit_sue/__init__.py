"""Path-based logit stochastic user equilibrium: fixed-point, BB and Newton solvers."""
from .equilibrium import FlowState, LogitParams, SueProblem, aec, logit_probabilities, rgap
from .network import DemandTable, Link, Network, read_net, read_trips
from .pathset import PathSet, build_incidence, generate_pathset, yen_k_shortest
from .solvers import NewtonConfig, SolverConfig, SolveRun, solve

__all__ = [
    "DemandTable", "FlowState", "Link", "LogitParams", "Network", "NewtonConfig", "PathSet",
    "SolveRun", "SolverConfig", "SueProblem", "aec", "build_incidence", "generate_pathset",
    "logit_probabilities", "read_net", "read_trips", "rgap", "solve", "yen_k_shortest",
]
