import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logit_sue.instances import braess_network, load_network
from logit_sue.network import (
    AFFINE, DemandTable, Link, Network, NetworkValidationError, TntpParseError, affine_link,
    link_cost, link_cost_derivative, parse_tntp_net, parse_tntp_trips, read_net, serialize_tntp_net,
    serialize_tntp_trips,
)

NET = """<NUMBER OF ZONES> 2
<NUMBER OF NODES> 3
<FIRST THRU NODE> 1
<NUMBER OF LINKS> 2
<END OF METADATA>
~ init term cap length fft b power speed toll type ;
\t1\t2\t100\t1\t6\t0.15\t4\t0\t0\t1\t;
\t2\t3\t50\t1\t3\t0.15\t4\t0\t0\t1\t;
"""

TRIPS = """<NUMBER OF ZONES> 3
<TOTAL OD FLOW> 30.0
<END OF METADATA>

Origin 1
    2 :     10.0;     3 :     20.0;
Origin 2
    1 :      0.0;
"""


def test_parse_small_net():
    net = parse_tntp_net(NET)
    assert net.node_count == 3
    assert net.link_count == 2
    ln = net.links[0]
    assert (ln.tail, ln.head) == (0, 1)
    assert ln.capacity == 100 and ln.free_flow_time == 6
    assert ln.bpr_alpha == 0.15 and ln.bpr_beta == 4
    assert ln.cost_kind == "bpr"


def test_parse_trips_skips_zero_entries():
    demand = parse_tntp_trips(TRIPS)
    assert demand.entries == ((0, 1, 10.0), (0, 2, 20.0))
    assert demand.total_demand == 30.0
    assert demand.warnings == ()


def test_trip_total_mismatch_is_recorded():
    demand = parse_tntp_trips(TRIPS.replace("30.0", "40.0"))
    assert len(demand.warnings) == 1
    assert "0.5%" in demand.warnings[0]


def test_sioux_falls_data():
    net, demand = load_network("sioux_falls")
    assert net.node_count == 24
    assert net.link_count == 76
    assert len(demand) == 528
    assert demand.total_demand == pytest.approx(360600.0)
    assert demand.demand.max() == 4400.0
    assert demand.warnings == ()


def test_bpr_cost_values():
    ln = Link(0, 1, capacity=100, free_flow_time=6, bpr_alpha=0.15, bpr_beta=4)
    assert link_cost(ln, 0.0) == 6.0
    assert link_cost(ln, 100.0) == pytest.approx(6 * 1.15)
    assert link_cost_derivative(ln, 100.0) == pytest.approx(6 * 0.15 * 4 / 100)
    assert link_cost_derivative(ln, 0.0) == 0.0


def test_affine_cost_values():
    ln = affine_link(0, 1, 5.0, 2.0)
    assert link_cost(ln, 3.0) == 11.0
    assert link_cost_derivative(ln, 3.0) == 2.0


def test_negative_flow_rejected():
    with pytest.raises(ValueError):
        link_cost(Link(0, 1, 1.0, 1.0), -1.0)
    with pytest.raises(ValueError):
        braess_network().link_costs(np.array([1, 1, 1, 1, -1.0]))


bpr_params = dict(
    t0=st.floats(0.1, 20), alpha=st.floats(0, 2), beta=st.sampled_from([0.0, 1.0, 2.0, 4.0, 5.5]),
    cap=st.floats(1, 1e4),
)


@given(**bpr_params)
def test_bpr_derivative_matches_central_difference(t0, alpha, beta, cap):
    ln = Link(0, 1, cap, t0, alpha, beta)
    for a in np.linspace(0.0, 2.0 * cap, 21)[1:]:
        eps = 1e-5 * cap
        fd = (link_cost(ln, a + eps) - link_cost(ln, a - eps)) / (2 * eps)
        assert link_cost_derivative(ln, a) == pytest.approx(fd, rel=1e-6, abs=1e-12 * t0)
    at_zero = t0 * alpha / cap if beta == 1.0 else 0.0
    assert link_cost_derivative(ln, 0.0) == pytest.approx(at_zero)


@given(**bpr_params, f1=st.floats(0, 1e5), f2=st.floats(0, 1e5))
def test_bpr_cost_is_monotone(t0, alpha, beta, cap, f1, f2):
    ln = Link(0, 1, cap, t0, alpha, beta)
    lo, hi = sorted((f1, f2))
    assert link_cost(ln, lo) <= link_cost(ln, hi)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e4), min_size=76, max_size=76))
def test_vectorised_costs_match_scalar(flows):
    net, _ = load_network("sioux_falls")
    a = np.array(flows)
    costs = net.link_costs(a)
    ders = net.link_cost_derivatives(a)
    for i, ln in enumerate(net.links):
        assert costs[i] == pytest.approx(link_cost(ln, a[i]), rel=1e-12)
        assert ders[i] == pytest.approx(link_cost_derivative(ln, a[i]), rel=1e-12)


def test_net_round_trip():
    net, demand = load_network("sioux_falls")
    again = parse_tntp_net(serialize_tntp_net(net))
    assert again.links == net.links
    assert parse_tntp_trips(serialize_tntp_trips(demand)).entries == demand.entries


def test_braess_file_matches_builder():
    net, demand = load_network("braess")
    built = braess_network()
    assert all(ln.cost_kind == AFFINE for ln in net.links)
    a = np.array([4.0, 2.0, 2.0, 4.0, 2.0])
    assert np.array_equal(net.link_costs(a), built.link_costs(a))
    assert demand.entries == ((0, 3, 6.0),)


def test_unknown_header_tag():
    with pytest.raises(TntpParseError, match="line 1"):
        parse_tntp_net("<NUMBER OF THINGS> 3\n<END OF METADATA>\n")


def test_missing_end_of_metadata():
    with pytest.raises(TntpParseError, match="END OF METADATA"):
        parse_tntp_net("<NUMBER OF NODES> 3\n")


def test_non_numeric_field_reports_line():
    bad = NET.replace("\t100\t", "\tlots\t")
    with pytest.raises(TntpParseError, match="line 7"):
        parse_tntp_net(bad)


def test_node_beyond_declared_count():
    bad = NET.replace("\t2\t3\t50", "\t2\t9\t50")
    with pytest.raises(NetworkValidationError, match="NUMBER OF NODES"):
        parse_tntp_net(bad)


def test_zero_capacity_rejected():
    with pytest.raises(NetworkValidationError, match="capacity"):
        parse_tntp_net(NET.replace("\t50\t", "\t0\t"))


def test_malformed_trip_entry():
    with pytest.raises(TntpParseError, match="line 6"):
        parse_tntp_trips(TRIPS.replace("2 :     10.0;", "2 - 10.0;"))


def test_read_net_names_file(tmp_path: Path):
    p = tmp_path / "X_net.tntp"
    p.write_text("<NUMBER OF NODES> x\n<NUMBER OF LINKS> 1\n<END OF METADATA>\n")
    with pytest.raises(TntpParseError, match=str(p)):
        read_net(p)


def test_demand_validation_and_scaling():
    with pytest.raises(ValueError):
        DemandTable(((0, 1, 0.0),))
    d = DemandTable(((0, 1, 2.0), (1, 0, 3.0)))
    assert d.scaled(2).total_demand == 10.0
    assert math.isclose(d.total_demand, 5.0)


def test_network_rejects_bad_node_reference():
    with pytest.raises(NetworkValidationError):
        Network((Link(0, 5, 1.0, 1.0),), 3)
