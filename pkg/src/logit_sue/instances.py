"""Ready-made test instances: Braess, a two-link network, random small
networks and the bundled Sioux Falls data."""
from __future__ import annotations

import os
from importlib import resources
from pathlib import Path

import numpy as np

from .equilibrium import SueProblem
from .network import DemandTable, Link, Network, affine_link, parse_tntp_net, parse_tntp_trips, read_net, read_trips
from .pathset import PathSet, generate_pathset, pathset_from_routes, yen_k_shortest

# Braess nodes O, A, B, D = 0..3; links in the order OA, OB, AD, BD, AB.
BRAESS_LINKS = ("OA", "OB", "AD", "BD", "AB")
BRAESS_ROUTES = ((0, 2), (1, 3), (0, 4, 3))  # O-A-D, O-B-D, O-A-B-D

DATA_ENV = "LOGIT_SUE_DATA"
# File stems of the public TNTP distributions.
KNOWN_STEMS = {
    "sioux_falls": "SiouxFalls",
    "siouxfalls": "SiouxFalls",
    "ema": "EMA",
    "anaheim": "Anaheim",
    "bmc": "berlin-mitte-center",
    "braess": "Braess",
}


def braess_network() -> Network:
    links = [
        affine_link(0, 1, 0.0, 1.0),
        affine_link(0, 2, 5.0, 0.0),
        affine_link(1, 3, 5.0, 0.0),
        affine_link(2, 3, 0.0, 1.0),
        affine_link(1, 2, 0.0, 0.0),
    ]
    return Network(tuple(links), 4, 0, 4, "Braess")


def braess_problem(theta: float = 1.0, demand: float = 6.0) -> SueProblem:
    net = braess_network()
    ps = pathset_from_routes([(0, 3)], [BRAESS_ROUTES], {"generator": "manual"})
    return SueProblem.build(net, DemandTable(((0, 3, demand),), 4), ps, theta)


def two_link_problem(theta: float = 1.0, demand: float = 4.0) -> SueProblem:
    """Two parallel links with costs ``h1`` and ``2 + h2``."""
    net = Network((affine_link(0, 1, 0.0, 1.0), affine_link(0, 1, 2.0, 1.0)), 2, 0, 2, "two-link")
    ps = pathset_from_routes([(0, 1)], [((0,), (1,))], {"generator": "manual"})
    return SueProblem.build(net, DemandTable(((0, 1, demand),), 2), ps, theta)


def random_problem(rng: np.random.Generator, max_paths: int = 30, theta: float | None = None) -> SueProblem:
    """Random small BPR network with a few OD pairs and Yen path sets."""
    while True:
        n_nodes = int(rng.integers(4, 9))
        links = []
        for a in range(n_nodes):
            for b in range(n_nodes):
                if a != b and (b == (a + 1) % n_nodes or rng.random() < 0.35):
                    links.append(Link(a, b, capacity=float(rng.uniform(2, 20)),
                                      free_flow_time=float(rng.uniform(1, 10)),
                                      bpr_alpha=float(rng.uniform(0.1, 1.0)),
                                      bpr_beta=float(rng.choice([1.0, 2.0, 4.0]))))
        net = Network(tuple(links), n_nodes)
        n_od = int(rng.integers(1, 4))
        ods: dict[tuple[int, int], float] = {}
        for _ in range(n_od):
            o, d = rng.choice(n_nodes, 2, replace=False)
            ods[(int(o), int(d))] = float(rng.uniform(1, 20))
        adj = net.adjacency()
        pairs = list(ods)
        routes = [yen_k_shortest(net, o, d, int(rng.integers(1, 6)), adjacency=adj) for o, d in pairs]
        if sum(len(r) for r in routes) <= max_paths:
            break
    demand = DemandTable(tuple((o, d, ods[(o, d)]) for o, d in pairs), n_nodes)
    th = float(rng.uniform(0.2, 2.0)) if theta is None else theta
    return SueProblem.build(net, demand, pathset_from_routes(pairs, routes), th)


def parallel_chain_problem(rng: np.random.Generator, stages: int = 2, width: int = 2,
                           theta: float | None = None) -> SueProblem:
    """Chain of ``stages`` hops, each served by ``width`` parallel BPR links.

    Every combination of links is a path, so for ``width >= 2`` and
    ``stages >= 2`` there are demand-preserving path-flow changes that leave
    all link flows unchanged.
    """
    links = []
    for s in range(stages):
        for _ in range(width):
            links.append(Link(s, s + 1, capacity=float(rng.uniform(2, 20)),
                              free_flow_time=float(rng.uniform(1, 10)),
                              bpr_alpha=float(rng.uniform(0.1, 1.0)),
                              bpr_beta=float(rng.choice([1.0, 2.0, 4.0]))))
    net = Network(tuple(links), stages + 1)
    routes = [tuple(s * width + c for s, c in enumerate(combo)) for combo in np.ndindex(*(width,) * stages)]
    demand = DemandTable(((0, stages, float(rng.uniform(1, 20))),), stages + 1)
    th = float(rng.uniform(0.2, 2.0)) if theta is None else theta
    return SueProblem.build(net, demand, pathset_from_routes([(0, stages)], [routes]), th)


def random_flows(problem: SueProblem, rng: np.random.Generator) -> np.ndarray:
    """Strictly positive feasible flows, Dirichlet-distributed within each OD."""
    h = np.empty(problem.n)
    off = problem.od_offsets
    for j, d in enumerate(problem.od_demand):
        h[off[j]:off[j + 1]] = d * rng.dirichlet(np.ones(off[j + 1] - off[j]))
    return np.maximum(h, 1e-12)


def _bundled(name: str) -> bytes:
    return resources.files("logit_sue").joinpath("data", name).read_bytes()


def load_network(name_or_prefix: str) -> tuple[Network, DemandTable]:
    """Load ``<stem>_net.tntp`` and ``<stem>_trips.tntp``.

    ``name_or_prefix`` is a known network name (bundled Sioux Falls and
    Braess, or a file looked up in the directory named by ``LOGIT_SUE_DATA``)
    or a path prefix such as ``data/Anaheim``.
    """
    stem = KNOWN_STEMS.get(name_or_prefix.lower())
    if stem in ("SiouxFalls", "Braess"):
        net = parse_tntp_net(_bundled(f"{stem}_net.tntp"), stem)
        return net, parse_tntp_trips(_bundled(f"{stem}_trips.tntp"))
    if stem is not None:
        root = os.environ.get(DATA_ENV)
        if not root:
            raise FileNotFoundError(
                f"network {name_or_prefix!r} is not bundled; set {DATA_ENV} to a directory "
                f"holding {stem}_net.tntp and {stem}_trips.tntp"
            )
        prefix = Path(root) / stem
    else:
        prefix = Path(name_or_prefix)
    return read_net(f"{prefix}_net.tntp"), read_trips(f"{prefix}_trips.tntp")


def build_problem(name_or_prefix: str, theta: float, k: int = 20, method: str = "yen",
                  seed: int = 0, multiplier: float = 1.0) -> SueProblem:
    net, demand = load_network(name_or_prefix)
    ps = generate_pathset(net, demand, k, method, seed)
    return SueProblem.build(net, demand.scaled(multiplier), ps, theta)


def sioux_falls_pathset(k: int = 20) -> tuple[Network, DemandTable, PathSet]:
    net, demand = load_network("sioux_falls")
    return net, demand, generate_pathset(net, demand, k, "yen")
