import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logit_sue.instances import BRAESS_ROUTES, braess_network, braess_problem, load_network, random_problem
from logit_sue.network import DemandTable, Network, affine_link
from logit_sue.pathset import (
    NoPathError, PathSet, PathSetError, build_incidence, generate_pathset, pathset_from_routes,
    pathset_metrics, penalty_paths, read_pathset, route_cost, route_nodes, write_pathset, yen_k_shortest,
)


def _digraph(net: Network, costs: np.ndarray) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(range(net.node_count))
    for i, ln in enumerate(net.links):
        g.add_edge(ln.tail, ln.head, weight=float(costs[i]), idx=i)
    return g


def test_braess_yen_finds_all_three_paths():
    net = braess_network()
    routes = yen_k_shortest(net, 0, 3, 10)
    # free-flow costs: O-A-B-D = 0, then O-A-D and O-B-D tie at 5 (node order breaks the tie)
    assert routes == [(0, 4, 3), (0, 2), (1, 3)]
    assert set(routes) == set(BRAESS_ROUTES)


def test_yen_single_path_matches_networkx_dijkstra():
    net, _ = load_network("sioux_falls")
    costs = net.free_flow_costs()
    g = _digraph(net, costs)
    for o, d in [(0, 19), (5, 12), (23, 2)]:
        (r,) = yen_k_shortest(net, o, d, 1)
        assert route_cost(r, costs) == pytest.approx(nx.dijkstra_path_length(g, o, d))


def test_two_node_network_has_one_path():
    net = Network((affine_link(0, 1, 1.0, 0.0),), 2)
    assert yen_k_shortest(net, 0, 1, 5) == [(0,)]


def test_unreachable_destination():
    net = Network((affine_link(0, 1, 1.0, 0.0),), 3)
    with pytest.raises(NoPathError, match="node 1 to node 3"):
        yen_k_shortest(net, 0, 2, 2)
    demand = DemandTable(((0, 2, 1.0),), 3)
    with pytest.raises(NoPathError):
        generate_pathset(net, demand, 2)


def test_bad_arguments():
    net = braess_network()
    with pytest.raises(ValueError):
        yen_k_shortest(net, 0, 3, 0)
    with pytest.raises(ValueError):
        yen_k_shortest(net, 1, 1, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_yen_costs_match_networkx(seed, k):
    problem = random_problem(np.random.default_rng(seed))
    net = problem.network
    costs = net.free_flow_costs()
    g = _digraph(net, costs)
    adj = net.adjacency()
    for o, d in problem.pathset.od_pairs:
        ours = yen_k_shortest(net, o, d, k, adjacency=adj)
        ref = list(itertools.islice(nx.shortest_simple_paths(g, o, d, weight="weight"), k))
        ref_costs = [nx.path_weight(g, p, "weight") for p in ref]
        assert len(ours) == len(ref)
        assert [route_cost(r, costs) for r in ours] == pytest.approx(ref_costs, rel=1e-12)
        for r in ours:
            nodes = route_nodes(net, r)
            assert nodes[0] == o and nodes[-1] == d
            assert len(set(nodes)) == len(nodes)
        assert len(set(ours)) == len(ours)
        c = [route_cost(r, costs) for r in ours]
        assert all(a <= b + 1e-12 for a, b in zip(c, c[1:]))


def test_penalty_generator_is_deterministic_and_valid():
    net, demand = load_network("sioux_falls")
    a = generate_pathset(net, demand, 5, "penalty", seed=7)
    b = generate_pathset(net, demand, 5, "penalty", seed=7)
    assert a.path_links == b.path_links
    a.validate(net)
    assert all(1 <= len(a.block(j)) <= 5 for j in range(a.n_od))
    c = generate_pathset(net, demand, 5, "penalty", seed=8)
    assert c.path_links != a.path_links


def test_penalty_on_braess_yields_subset_of_true_paths():
    routes, warnings = penalty_paths(braess_network(), 0, 10, rng_seed=3, destinations=[3])
    assert warnings == []
    assert 1 <= len(routes[3]) <= 3
    assert set(routes[3]) <= set(BRAESS_ROUTES)
    assert routes[3][0] == (0, 4, 3)


def test_penalty_exits_early_when_only_one_path_exists():
    net = Network((affine_link(0, 1, 1.0, 0.0), affine_link(1, 2, 1.0, 0.0)), 3)
    routes, _ = penalty_paths(net, 0, 50, rng_seed=0)
    assert routes == {1: [(0,)], 2: [(0, 1)]}


def test_penalty_drops_unreachable_with_warning():
    net = Network((affine_link(0, 1, 1.0, 0.0),), 3)
    demand = DemandTable(((0, 1, 1.0), (0, 2, 1.0)), 3)
    ps = generate_pathset(net, demand, 3, "penalty")
    assert ps.od_pairs == ((0, 1),)
    assert len(ps.metadata["warnings"]) == 1


def test_braess_incidence():
    problem = braess_problem()
    D = problem.incidence.toarray()
    assert D.shape == (5, 3)
    assert D.sum(axis=0).tolist() == [2, 2, 3]
    assert (D @ np.ones(3)).tolist() == [2, 1, 1, 2, 1]
    h = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(problem.incidence.matvec(h), D @ h)
    x = np.arange(5.0)
    assert np.array_equal(problem.incidence.rmatvec(x), D.T @ x)


def test_incidence_rejects_repeated_link_and_bad_index():
    net = braess_network()
    with pytest.raises(PathSetError):
        build_incidence(pathset_from_routes([(0, 3)], [[(0, 9)]]), net)
    with pytest.raises(PathSetError):
        build_incidence(pathset_from_routes([(0, 3)], [[(0, 0)]]), net)


def test_pathset_structure_checks():
    with pytest.raises(PathSetError):
        PathSet(((0, 1),), np.array([0, 0]), ())
    ps = pathset_from_routes([(0, 3)], [[(0, 2), (0, 2)]])
    with pytest.raises(PathSetError, match="duplicate"):
        ps.validate(braess_network())
    with pytest.raises(PathSetError, match="disconnected"):
        pathset_from_routes([(0, 3)], [[(0, 3)]]).validate(braess_network())


def test_metrics_hand_cases():
    # one OD, identical costs, disjoint paths
    ps = pathset_from_routes([(0, 3)], [[(0, 2), (1, 3)]])
    assert pathset_metrics(ps, np.array([5.0, 5.0])) == (0.0, 0.0)
    # two paths sharing one of three distinct links: J = 1/3
    ps = pathset_from_routes([(0, 3)], [[(0, 2), (0, 4)]])
    cv, jac = pathset_metrics(ps, np.array([2.0, 6.0]))
    assert jac == pytest.approx(1 / 3)
    assert cv == pytest.approx(0.5)
    # a single-path OD contributes zero to both means
    ps = pathset_from_routes([(0, 3), (0, 1)], [[(0, 2), (0, 4)], [(0,)]])
    cv2, jac2 = pathset_metrics(ps, np.array([2.0, 6.0, 1.0]))
    assert (cv2, jac2) == pytest.approx((0.25, 1 / 6))


def test_metrics_zero_cost_raises():
    ps = pathset_from_routes([(0, 3)], [[(0, 4, 3), (1, 3)]])
    with pytest.raises(PathSetError):
        pathset_metrics(ps, np.zeros(2))


def test_sioux_falls_yen_pathset(sioux_falls):
    ps = sioux_falls.pathset
    assert ps.n_od == 528
    assert ps.n_total == 10560
    ps.validate(sioux_falls.network)
    assert ps.metadata["mean_cv"] == pytest.approx(0.2046, abs=5e-4)
    assert ps.metadata["mean_jaccard"] == pytest.approx(0.1634, abs=5e-4)


def test_pathset_round_trip(tmp_path):
    net, demand = load_network("sioux_falls")
    ps = generate_pathset(net, demand, 3)
    out = tmp_path / "paths.txt"
    write_pathset(ps, out, {"network": "sioux_falls"})
    back = read_pathset(out)
    assert back.od_pairs == ps.od_pairs
    assert back.path_links == ps.path_links
    assert np.array_equal(back.od_offsets, ps.od_offsets)
    assert back.metadata["network"] == "sioux_falls"
    assert back.metadata["k"] == 3


def test_read_pathset_reports_malformed_line(tmp_path):
    out = tmp_path / "p.txt"
    out.write_text("0 1 4 : 0,2\n0 1 4 ; 1,3\n")
    with pytest.raises(PathSetError, match="line 2"):
        read_pathset(out)


def test_metrics_single_zero_cost_path_counts_as_zero():
    ps = pathset_from_routes([(0, 3)], [[(0, 4, 3)]])
    assert pathset_metrics(ps, np.zeros(1)) == (0.0, 0.0)
