"""Network loading, the logit mapping, its residual and equilibrium gap measures.

Path-indexed vectors are OD-blocked: the paths of OD ``j`` occupy
``od_offsets[j]:od_offsets[j+1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import DemandTable, Network
from .pathset import IncidenceMatrix, PathSet, build_incidence

TINY = np.finfo(float).tiny
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LogitParams:
    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")


def segment_sum(x: np.ndarray, od_offsets: np.ndarray) -> np.ndarray:
    """Per-OD sums of an OD-blocked vector (or of each column of an (n, b) block)."""
    return np.add.reduceat(x, od_offsets[:-1], axis=0)


def broadcast(per_od: np.ndarray, od_offsets: np.ndarray) -> np.ndarray:
    return np.repeat(per_od, np.diff(od_offsets), axis=0)


def load(h: np.ndarray, D: IncidenceMatrix) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("path flows must be non-negative")
    return D.matvec(h)


def logit_probabilities(c: np.ndarray, theta: float, od_offsets: np.ndarray) -> np.ndarray:
    """Per-OD softmax of ``-theta * c``. Underflowed entries are clamped to the
    smallest normal double, so every probability is strictly positive."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    z = -theta * np.asarray(c, dtype=float)
    z -= broadcast(np.maximum.reduceat(z, od_offsets[:-1]), od_offsets)
    e = np.exp(z)
    p = e / broadcast(segment_sum(e, od_offsets), od_offsets)
    small = p < TINY
    if small.any():
        p[small] = TINY
        p /= broadcast(segment_sum(p, od_offsets), od_offsets)
    return p


@dataclass(frozen=True, eq=False)
class SueProblem:
    """A logit SUE instance on a fixed path set."""

    network: Network
    pathset: PathSet
    incidence: IncidenceMatrix
    od_demand: np.ndarray
    theta: float

    def __post_init__(self):
        LogitParams(self.theta)
        d = np.asarray(self.od_demand, dtype=float)
        if d.shape != (self.pathset.n_od,):
            raise ValueError("need exactly one demand value per OD block")
        if np.any(d <= 0):
            raise ValueError("OD demand must be positive")
        object.__setattr__(self, "od_demand", d)
        object.__setattr__(self, "path_demand", broadcast(d, self.pathset.od_offsets))

    @classmethod
    def build(cls, network: Network, demand: DemandTable, pathset: PathSet, theta: float) -> "SueProblem":
        lookup = {(o, d): v for o, d, v in demand.entries}
        od_demand = np.array([lookup[od] for od in pathset.od_pairs])
        return cls(network, pathset, build_incidence(pathset, network), od_demand, theta)

    @property
    def n(self) -> int:
        return self.pathset.n_total

    @property
    def od_offsets(self) -> np.ndarray:
        return self.pathset.od_offsets

    @property
    def total_demand(self) -> float:
        return float(self.od_demand.sum())

    def with_theta(self, theta: float) -> "SueProblem":
        return SueProblem(self.network, self.pathset, self.incidence, self.od_demand, theta)

    def scaled(self, multiplier: float) -> "SueProblem":
        return SueProblem(self.network, self.pathset, self.incidence, self.od_demand * multiplier, self.theta)

    def path_costs(self, h: np.ndarray) -> np.ndarray:
        return self.incidence.rmatvec(self.network.link_costs(load(h, self.incidence)))

    def probabilities(self, c: np.ndarray) -> np.ndarray:
        return logit_probabilities(c, self.theta, self.od_offsets)

    def logit_mapping(self, h: np.ndarray) -> np.ndarray:
        return self.path_demand * self.probabilities(self.path_costs(h))

    def residual(self, h: np.ndarray) -> np.ndarray:
        return self.logit_mapping(h) - h

    def initial_flows(self) -> np.ndarray:
        """Logit loading at free-flow costs."""
        return self.logit_mapping(np.zeros(self.n))

    def od_sums(self, x: np.ndarray) -> np.ndarray:
        return segment_sum(x, self.od_offsets)


def path_costs(problem: SueProblem, h: np.ndarray) -> np.ndarray:
    return problem.path_costs(h)


def logit_mapping(problem: SueProblem, h: np.ndarray) -> np.ndarray:
    return problem.logit_mapping(h)


def residual(problem: SueProblem, h: np.ndarray) -> np.ndarray:
    return problem.residual(h)


def _excess(problem: SueProblem, h: np.ndarray, c: np.ndarray, floor: float | None):
    h = np.asarray(h, dtype=float)
    if floor is None:
        if np.any(h <= 0):
            raise ValueError("gap needs strictly positive path flows; clamp h (or pass floor=) first")
        logs = np.log(h)
    else:
        logs = np.log(np.maximum(h, floor))
    w = c + logs / problem.theta
    w_min = np.minimum.reduceat(w, problem.od_offsets[:-1])
    return float(np.sum(h * (w - broadcast(w_min, problem.od_offsets)))), w


def rgap(problem: SueProblem, h: np.ndarray, c: np.ndarray | None = None,
         floor: float | None = None) -> float:
    """Relative gap with ``w_i = c_i + ln(h_i) / theta``."""
    c = problem.path_costs(h) if c is None else c
    num, w = _excess(problem, h, c, floor)
    den = float(np.sum(np.asarray(h) * np.abs(w)))
    return num / den if den > 0 else 0.0


def aec(problem: SueProblem, h: np.ndarray, c: np.ndarray | None = None,
        floor: float | None = None) -> float:
    """Average excess cost (time units per unit of demand)."""
    c = problem.path_costs(h) if c is None else c
    return _excess(problem, h, c, floor)[0] / problem.total_demand


class FlowState:
    """Path flows with lazily evaluated link flows, costs, probabilities and
    marginal link costs. Assigning ``h`` drops every cache and bumps ``version``."""

    def __init__(self, problem: SueProblem, h: np.ndarray):
        self.problem = problem
        self.version = 0
        self.h = h

    @property
    def h(self) -> np.ndarray:
        return self._h

    @h.setter
    def h(self, value: np.ndarray) -> None:
        value = np.array(value, dtype=float)
        if value.shape != (self.problem.n,):
            raise ValueError(f"expected {self.problem.n} path flows, got shape {value.shape}")
        if np.any(value < 0):
            raise ValueError("path flows must be non-negative")
        value.setflags(write=False)
        self._h = value
        self._a = self._c = self._p = self._tprime = None
        self.version += 1

    @property
    def a(self) -> np.ndarray:
        if self._a is None:
            self._a = load(self._h, self.problem.incidence)
        return self._a

    @property
    def c(self) -> np.ndarray:
        if self._c is None:
            self._c = self.problem.incidence.rmatvec(self.problem.network.link_costs(self.a))
        return self._c

    @property
    def p(self) -> np.ndarray:
        if self._p is None:
            self._p = self.problem.probabilities(self.c)
        return self._p

    @property
    def t_prime(self) -> np.ndarray:
        if self._tprime is None:
            self._tprime = self.problem.network.link_cost_derivatives(self.a)
        return self._tprime

    @property
    def target(self) -> np.ndarray:
        return self.problem.path_demand * self.p

    @property
    def residual(self) -> np.ndarray:
        return self.target - self._h

    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residual))

    def rgap(self, floor: float | None = None) -> float:
        return rgap(self.problem, self._h, self.c, floor)

    def aec(self, floor: float | None = None) -> float:
        return aec(self.problem, self._h, self.c, floor)
