"""Fixed path sets per OD pair, the link-path incidence matrix and path-set metrics."""
from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .network import DemandTable, Network

log = logging.getLogger(__name__)

Route = tuple[int, ...]  # link indices, origin to destination


class NoPathError(ValueError):
    def __init__(self, origin: int, destination: int):
        self.origin, self.destination = origin, destination
        super().__init__(f"no path from node {origin + 1} to node {destination + 1}")


class PathSetError(ValueError):
    pass


def route_nodes(network: Network, links: Route) -> tuple[int, ...]:
    if not links:
        return ()
    return (int(network.tail[links[0]]),) + tuple(int(network.head[l]) for l in links)


def route_cost(links: Route, costs: np.ndarray) -> float:
    return math.fsum(costs[l] for l in links)


def _dijkstra(adj, costs, source, banned_nodes=frozenset(), banned_links=frozenset(), target=None):
    """Shortest-path tree from ``source``. Returns predecessor links (-1 = none)
    and distances. Ties keep the first label found, which is deterministic."""
    n = len(adj)
    dist = [math.inf] * n
    pred = [-1] * n
    done = [False] * n
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        du, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == target:
            break
        for v, l in adj[u]:
            if v in banned_nodes or l in banned_links or done[v]:
                continue
            nd = du + costs[l]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = l
                heapq.heappush(heap, (nd, v))
    return pred, dist


def _trace(network: Network, pred, source: int, target: int) -> Route | None:
    if target != source and pred[target] < 0:
        return None
    out = []
    v = target
    while v != source:
        l = pred[v]
        out.append(l)
        v = int(network.tail[l])
    return tuple(reversed(out))


def yen_k_shortest(network: Network, origin: int, destination: int, k: int,
                   costs: np.ndarray | None = None, adjacency=None) -> list[Route]:
    """Up to ``k`` loopless shortest paths, cheapest first.

    Equal-cost candidates are ordered lexicographically by node sequence.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if origin == destination:
        raise ValueError("origin and destination must differ")
    costs = network.free_flow_costs() if costs is None else np.asarray(costs, dtype=float)
    adj = network.adjacency() if adjacency is None else adjacency
    cost_list = costs.tolist()

    pred, _ = _dijkstra(adj, cost_list, origin, target=destination)
    first = _trace(network, pred, origin, destination)
    if first is None:
        raise NoPathError(origin, destination)

    found = [first]
    found_nodes = [route_nodes(network, first)]
    seen = {first}
    candidates: list[tuple[float, tuple[int, ...], Route]] = []
    while len(found) < k:
        last, last_nodes = found[-1], found_nodes[-1]
        for j in range(len(last)):
            spur = last_nodes[j]
            root = last[:j]
            banned_links = {p[j] for p in found if len(p) > j and p[:j] == root}
            banned_nodes = set(last_nodes[:j])
            pred, _ = _dijkstra(adj, cost_list, spur, banned_nodes, banned_links, destination)
            tail = _trace(network, pred, spur, destination)
            if tail is None:
                continue
            cand = root + tail
            if cand in seen:
                continue
            seen.add(cand)
            heapq.heappush(
                candidates, (route_cost(cand, costs), route_nodes(network, cand), cand)
            )
        if not candidates:
            break
        _, nodes, cand = heapq.heappop(candidates)
        found.append(cand)
        found_nodes.append(nodes)
    return found


def penalty_paths(network: Network, origin: int, k: int, rng_seed: int,
                  costs: np.ndarray | None = None, destinations=None,
                  adjacency=None) -> tuple[dict[int, list[Route]], list[str]]:
    """Link-penalty path generation from one origin.

    Each round penalises (cost x1.5) every link of each destination's most
    recently added path independently with probability 0.5, then recomputes
    the shortest-path tree. Penalties accumulate within the origin only.
    Returns per-destination route lists and warning messages for unreachable
    destinations.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    adj = network.adjacency() if adjacency is None else adjacency
    penalised = (network.free_flow_costs() if costs is None else np.asarray(costs, float)).tolist()
    if destinations is None:
        destinations = [v for v in range(network.node_count) if v != origin]
    destinations = sorted(set(destinations) - {origin})

    pred, _ = _dijkstra(adj, penalised, origin)
    routes: dict[int, list[Route]] = {}
    warnings = []
    for d in destinations:
        r = _trace(network, pred, origin, d)
        if r is None:
            msg = f"no path from node {origin + 1} to node {d + 1}; OD omitted"
            log.warning(msg)
            warnings.append(msg)
        else:
            routes[d] = [r]
    latest = {d: rs[0] for d, rs in routes.items()}
    known = {d: set(rs) for d, rs in routes.items()}

    for _ in range(k - 1):
        active = [d for d in routes if len(routes[d]) < k]
        if not active:
            break
        for d in active:
            path = latest[d]
            hit = rng.random(len(path)) < 0.5
            for l, h in zip(path, hit):
                if h:
                    penalised[l] *= 1.5
        pred, _ = _dijkstra(adj, penalised, origin)
        added = False
        for d in active:
            r = _trace(network, pred, origin, d)
            if r not in known[d]:
                known[d].add(r)
                routes[d].append(r)
                latest[d] = r
                added = True
        if not added:
            break
    return routes, warnings


@dataclass(frozen=True, eq=False)
class PathSet:
    """OD-blocked path set. Block ``j`` holds the paths of ``od_pairs[j]``."""

    od_pairs: tuple[tuple[int, int], ...]
    od_offsets: np.ndarray
    path_links: tuple[Route, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        off = np.asarray(self.od_offsets, dtype=np.int64)
        object.__setattr__(self, "od_offsets", off)
        off.setflags(write=False)
        if len(off) != len(self.od_pairs) + 1 or off[0] != 0 or off[-1] != len(self.path_links):
            raise PathSetError("od_offsets must have one entry per OD plus a sentinel")
        if np.any(np.diff(off) <= 0):
            raise PathSetError("every OD pair needs at least one path (od_offsets strictly increasing)")
        if any(len(r) == 0 for r in self.path_links):
            raise PathSetError("empty path")

    @property
    def n_total(self) -> int:
        return len(self.path_links)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    @property
    def od_index(self) -> np.ndarray:
        """OD block index of each path."""
        return np.repeat(np.arange(self.n_od), np.diff(self.od_offsets))

    def block(self, j: int) -> tuple[Route, ...]:
        return self.path_links[self.od_offsets[j]:self.od_offsets[j + 1]]

    def validate(self, network: Network) -> None:
        """Check connectivity, simplicity and uniqueness of every path."""
        for j, (o, d) in enumerate(self.od_pairs):
            block = self.block(j)
            if len(set(block)) != len(block):
                raise PathSetError(f"duplicate path in OD block {j}")
            for r in block:
                if max(r) >= network.link_count or min(r) < 0:
                    raise PathSetError(f"invalid link index in OD block {j}")
                nodes = route_nodes(network, r)
                if nodes[0] != o or nodes[-1] != d:
                    raise PathSetError(f"path in OD block {j} does not join its origin and destination")
                if any(network.head[a] != network.tail[b] for a, b in zip(r, r[1:])):
                    raise PathSetError(f"disconnected path in OD block {j}")
                if len(set(nodes)) != len(nodes):
                    raise PathSetError(f"path with a repeated node in OD block {j}")


def pathset_from_routes(od_pairs, routes_per_od, metadata=None) -> PathSet:
    offsets = [0]
    flat: list[Route] = []
    for rs in routes_per_od:
        flat.extend(tuple(r) for r in rs)
        offsets.append(len(flat))
    return PathSet(tuple(tuple(p) for p in od_pairs), np.array(offsets), tuple(flat), dict(metadata or {}))


def generate_pathset(network: Network, demand: DemandTable, k: int, method: str = "yen",
                     seed: int = 0, costs: np.ndarray | None = None) -> PathSet:
    """Path set for every OD of ``demand`` under fixed link costs (free flow by default).

    Unreachable ODs raise ``NoPathError`` with ``yen`` and are dropped with a
    warning recorded in ``metadata["warnings"]`` with ``penalty``.
    """
    costs = network.free_flow_costs() if costs is None else costs
    adj = network.adjacency()
    meta = {"generator": method, "k": k, "seed": seed if method == "penalty" else None}
    if method == "yen":
        od_pairs = [(o, d) for o, d, _ in demand.entries]
        routes = [yen_k_shortest(network, o, d, k, costs, adj) for o, d in od_pairs]
        meta["warnings"] = []
    elif method == "penalty":
        by_origin: dict[int, list[int]] = {}
        for o, d, _ in demand.entries:
            by_origin.setdefault(o, []).append(d)
        found: dict[tuple[int, int], list[Route]] = {}
        warnings: list[str] = []
        for o, dests in by_origin.items():
            per_dest, w = penalty_paths(network, o, k, seed + o, costs, dests, adj)
            warnings.extend(w)
            for d, rs in per_dest.items():
                found[(o, d)] = rs
        od_pairs = [(o, d) for o, d, _ in demand.entries if (o, d) in found]
        routes = [found[od] for od in od_pairs]
        meta["warnings"] = warnings
    else:
        raise ValueError(f"unknown path method {method!r}")
    ps = pathset_from_routes(od_pairs, routes, meta)
    try:
        mean_cv, mean_jac = pathset_metrics(ps, path_cost_vector(ps, costs))
    except PathSetError as exc:  # diagnostics only; the path set itself is valid
        mean_cv = mean_jac = None
        ps.metadata["warnings"].append(str(exc))
    ps.metadata.update(paths=ps.n_total, od_pairs=ps.n_od, mean_cv=mean_cv, mean_jaccard=mean_jac)
    return ps


def path_cost_vector(pathset: PathSet, link_costs: np.ndarray) -> np.ndarray:
    return np.array([route_cost(r, link_costs) for r in pathset.path_links])


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    """Binary link-path incidence ``D`` (links x paths), kept in CSR and CSC form."""

    csr: sp.csr_matrix
    csc: sp.csc_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def matvec(self, h: np.ndarray) -> np.ndarray:
        """``D @ h``; ``h`` may be a vector or an (n, b) block."""
        if h.shape[0] != self.shape[1]:
            raise ValueError(f"expected {self.shape[1]} path entries, got {h.shape[0]}")
        return self.csr @ h

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        """``D.T @ x``."""
        if x.shape[0] != self.shape[0]:
            raise ValueError(f"expected {self.shape[0]} link entries, got {x.shape[0]}")
        return self.csc.T @ x

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


def build_incidence(pathset: PathSet, network: Network) -> IncidenceMatrix:
    n_links = network.link_count
    cols = np.repeat(np.arange(pathset.n_total), [len(r) for r in pathset.path_links])
    rows = np.fromiter((l for r in pathset.path_links for l in r), dtype=np.int64, count=len(cols))
    if len(rows) and (rows.min() < 0 or rows.max() >= n_links):
        raise PathSetError("path references a link index outside the network")
    data = np.ones(len(rows))
    coo = sp.coo_matrix((data, (rows, cols)), shape=(n_links, pathset.n_total))
    csr = coo.tocsr()
    if csr.nnz and csr.data.max() > 1:
        raise PathSetError("a path uses the same link twice")
    return IncidenceMatrix(csr, coo.tocsc())


def pathset_metrics(pathset: PathSet, free_flow_costs: np.ndarray) -> tuple[float, float]:
    """Mean per-OD coefficient of variation of path costs and mean per-OD
    pairwise Jaccard index of path link sets. Single-path ODs count as 0."""
    costs = np.asarray(free_flow_costs, dtype=float)
    cvs, jacs = [], []
    for j in range(pathset.n_od):
        lo, hi = pathset.od_offsets[j], pathset.od_offsets[j + 1]
        if hi - lo < 2:
            cvs.append(0.0)
            jacs.append(0.0)
            continue
        c = costs[lo:hi]
        mean = c.mean()
        if mean == 0:
            raise PathSetError(f"OD block {j} has zero mean path cost; CV undefined")
        cvs.append(c.std() / mean)
        sets = [frozenset(r) for r in pathset.path_links[lo:hi]]
        jacs.append(float(np.mean([len(a & b) / len(a | b) for a, b in combinations(sets, 2)])))
    return float(np.mean(cvs)), float(np.mean(jacs))


def write_pathset(pathset: PathSet, path: str | Path, extra_metadata: dict | None = None) -> None:
    """Write ``od_index origin destination : link,link,...`` lines (1-based
    nodes, 0-based link indices) plus a ``.json`` metadata sidecar."""
    path = Path(path)
    lines = []
    for j, (o, d) in enumerate(pathset.od_pairs):
        for r in pathset.block(j):
            lines.append(f"{j} {o + 1} {d + 1} : {','.join(map(str, r))}")
    path.write_text("\n".join(lines) + "\n")
    meta = dict(pathset.metadata)
    meta.update(extra_metadata or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_pathset(path: str | Path) -> PathSet:
    path = Path(path)
    od_pairs: list[tuple[int, int]] = []
    routes: list[list[Route]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            head, links = line.split(":")
            j, o, d = (int(x) for x in head.split())
            route = tuple(int(x) for x in links.split(","))
        except ValueError:
            raise PathSetError(f"{path}: line {lineno}: malformed path line") from None
        if j == len(od_pairs):
            od_pairs.append((o - 1, d - 1))
            routes.append([])
        elif j != len(od_pairs) - 1 or od_pairs[j] != (o - 1, d - 1):
            raise PathSetError(f"{path}: line {lineno}: OD blocks must be contiguous and ordered")
        routes[j].append(route)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return pathset_from_routes(od_pairs, routes, meta)
