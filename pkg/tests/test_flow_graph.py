import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SOLID, example_topology, to_labels
from lemflow.flow_graph import (
    FlowGraph,
    MfdFlowGraph,
    StructuralError,
    compute_donors,
    compute_mfd,
    compute_receivers,
    generate_mfd_order,
    generate_queue,
    generate_stack,
    route_d8,
)
from lemflow.grid import NOFLOW, Neighborhood, Topology, index_of


def _labels_or_noflow(rec):
    return ["NoFlow" if r == NOFLOW else int(r) + 1 for r in rec]


# --------------------------------------------------------------------------
# worked 10-node example

def test_example_receivers(example):
    topo, elev = example
    g = compute_receivers(elev, topo)
    assert _labels_or_noflow(g.rec) == [2, 5, 2, 7, "NoFlow", 5, 6, 5, 7, 8]


def test_example_donors(example):
    topo, elev = example
    g = route_d8(elev, topo)
    assert g.dnum.tolist() == [0, 2, 0, 0, 3, 1, 2, 1, 0, 0]
    d = topo.dmax
    assert set(to_labels(g.donor[d * 4 : d * 4 + g.dnum[4]])) == {2, 6, 8}
    assert set(to_labels(g.donor[d * 6 : d * 6 + g.dnum[6]])) == {4, 9}


def test_example_queue(example):
    topo, elev = example
    plan = generate_queue(route_d8(elev, topo))
    assert to_labels(plan.order) == [5, 2, 6, 8, 1, 3, 7, 10, 4, 9]
    assert plan.levels.tolist() == [0, 1, 4, 8, 10]


def test_example_stack_is_depth_first(example):
    topo, elev = example
    plan = generate_stack(route_d8(elev, topo))
    assert to_labels(plan.order) == [5, 2, 1, 3, 6, 7, 4, 9, 8, 10]
    assert plan.levels.tolist() == [0, 10]


# --------------------------------------------------------------------------
# small grids

def test_local_pit_has_no_receiver():
    elev = np.full(9, 9.0)
    elev[4] = 5.0
    g = compute_receivers(elev, Topology.from_grid(3, 3))
    assert g.rec[4] == NOFLOW
    assert np.all(g.rec == NOFLOW)  # perimeter never routes


def test_ramp_prefers_steeper_diagonal():
    w = 4
    elev = np.array([x + y for y in range(w) for x in range(w)], dtype=np.float64)
    g = compute_receivers(elev, Topology.from_grid(w, w))
    assert g.rec[index_of(1, 1, w)] == index_of(0, 0, w)
    assert g.rdist[index_of(1, 1, w)] == pytest.approx(math.sqrt(2))


def test_ties_go_to_first_neighbour_in_stencil_order():
    elev = np.full(9, 5.0)
    elev[4] = 6.0
    elev[1] = elev[3] = 4.0  # equal cardinal slopes north and west
    g = compute_receivers(elev, Topology.from_grid(3, 3))
    assert g.rec[4] == 1


def test_all_noflow_graph():
    topo = Topology.from_grid(4, 3)
    g = compute_donors(FlowGraph(np.full(12, NOFLOW), np.zeros(12), topo.dmax), topo)
    assert np.all(g.dnum == 0)
    plan = generate_queue(g)
    assert plan.order.tolist() == list(range(12))
    assert plan.levels.tolist() == [0, 12]
    stack = generate_stack(g)
    assert np.all(np.diff(stack.levels) == 1)


def test_cycle_is_structural_error():
    topo = Topology.from_grid(3, 3)
    rec = np.full(9, NOFLOW)
    rec[4], rec[5] = 5, 4
    g = compute_donors(FlowGraph(rec, np.ones(9), topo.dmax), topo)
    with pytest.raises(StructuralError):
        generate_queue(g)
    with pytest.raises(StructuralError):
        generate_stack(g)


def test_queue_requires_donors():
    topo = Topology.from_grid(3, 3)
    with pytest.raises(ValueError, match="donor"):
        generate_queue(compute_receivers(np.zeros(9), topo))


# --------------------------------------------------------------------------
# oracles on random grids

def _roots(rec):
    """Root (NoFlow cell) of every cell, by walking receiver chains."""
    out = np.empty(rec.size, dtype=np.int64)
    for c in range(rec.size):
        r = c
        while rec[r] != NOFLOW:
            r = rec[r]
        out[c] = r
    return out


@pytest.mark.parametrize("conn", [4, 8])
def test_queue_is_topological_order(conn):
    rng = np.random.default_rng(3)
    topo = Topology.from_grid(20, 20, Neighborhood(conn))
    g = route_d8(rng.random(400), topo)
    plan = generate_queue(g)
    pos = np.empty(400, dtype=np.int64)
    pos[plan.order] = np.arange(400)
    has = g.has_receiver()
    assert np.all(pos[has] > pos[g.rec[has]])
    lvl = plan.level_of()
    assert np.all(lvl[has] == lvl[g.rec[has]] + 1)
    assert np.all(lvl[~has] == 0)


def test_stack_segments_match_reachability():
    rng = np.random.default_rng(11)
    topo = Topology.from_grid(20, 20)
    g = route_d8(rng.random(400), topo)
    plan = generate_stack(g)
    roots = _roots(g.rec)
    for s in range(plan.nlevels):
        seg = plan.level(s)
        source = seg[0]
        assert g.rec[source] == NOFLOW
        assert set(seg.tolist()) == set(np.flatnonzero(roots == source).tolist())
        # preorder: every cell after its receiver
        pos = {c: i for i, c in enumerate(seg.tolist())}
        assert all(pos[c] > pos[g.rec[c]] for c in seg[1:].tolist())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 30), st.integers(3, 30))
def test_plan_properties_and_parallel_agreement(seed, w, h):
    rng = np.random.default_rng(seed)
    topo = Topology.from_grid(w, h)
    elev = rng.random(w * h)
    g = route_d8(elev, topo)
    gp = route_d8(elev, topo, parallel=True)
    assert np.array_equal(g.rec, gp.rec) and np.array_equal(g.donor, gp.donor)
    for plan in (generate_queue(g), generate_stack(g)):
        assert np.array_equal(np.sort(plan.order), np.arange(w * h))
        assert plan.levels[0] == 0 and plan.levels[-1] == w * h
    # every donor points back at the cell that lists it
    d = topo.dmax
    for c in range(w * h):
        for k in range(g.dnum[c]):
            assert g.rec[g.donor[d * c + k]] == c
    assert g.dnum.sum() == g.has_receiver().sum()


def test_receivers_are_strictly_downhill():
    rng = np.random.default_rng(5)
    topo = Topology.from_grid(50, 50)
    elev = rng.random(2500)
    g = compute_receivers(elev, topo)
    has = g.has_receiver()
    assert np.all(elev[g.rec[has]] < elev[has])
    assert not np.any(has & topo.boundary)


# --------------------------------------------------------------------------
# multiple flow directions

def test_mfd_single_downslope_neighbour():
    elev = np.full(9, 5.0)
    elev[4], elev[1] = 3.0, 1.0
    mfd = compute_mfd(elev, Topology.from_grid(3, 3))
    assert mfd.receivers_of(4) == [(1, 1.0)]


def test_mfd_slope_weights():
    elev = np.full(9, 5.0)
    elev[4], elev[3], elev[5] = 2.0, 1.0, 0.0
    mfd = compute_mfd(elev, Topology.from_grid(3, 3), exponent=1.0)
    got = dict(mfd.receivers_of(4))
    assert got == pytest.approx({3: 1 / 3, 5: 2 / 3})


def test_mfd_pit_has_no_receivers():
    elev = np.full(9, 5.0)
    elev[4] = 1.0
    mfd = compute_mfd(elev, Topology.from_grid(3, 3))
    assert mfd.nrec[4] == 0
    plan = generate_mfd_order(mfd)
    assert plan.levels.tolist() == [0, 9]


def _check_mfd_levels(mfd, plan):
    lvl = plan.level_of()
    for c in range(mfd.size):
        for r, _ in mfd.receivers_of(c):
            assert lvl[c] > lvl[r]


def test_mfd_example_with_extra_receivers():
    topo = example_topology()
    edges = [(a - 1, b - 1) for a, b in SOLID + [(3, 6), (7, 8)]]
    mfd = MfdFlowGraph.from_edges(edges, topo)
    plan = generate_mfd_order(mfd)
    _check_mfd_levels(mfd, plan)
    assert mfd.indegree.tolist() == [0, 2, 0, 0, 3, 2, 2, 2, 0, 0]
    assert to_labels(plan.order) == [5, 2, 6, 8, 1, 3, 7, 10, 4, 9]
    assert plan.levels.tolist() == [0, 1, 4, 8, 10]


@pytest.mark.parametrize("seed", range(5))
def test_mfd_levels_on_random_grids(seed):
    rng = np.random.default_rng(seed)
    topo = Topology.from_grid(30, 30)
    mfd = compute_mfd(rng.random(900), topo, exponent=1.1)
    plan = generate_mfd_order(mfd)
    assert np.array_equal(np.sort(plan.order), np.arange(900))
    _check_mfd_levels(mfd, plan)
    for c in range(900):
        if mfd.nrec[c]:
            assert sum(w for _, w in mfd.receivers_of(c)) == pytest.approx(1.0, abs=1e-12)


def test_d8_degenerate_mfd_levels_match_queue():
    rng = np.random.default_rng(9)
    topo = Topology.from_grid(25, 25)
    g = route_d8(rng.random(625), topo)
    q = generate_queue(g)
    m = generate_mfd_order(MfdFlowGraph.from_receivers(g.rec, topo))
    assert np.array_equal(q.level_of(), m.level_of())
    for l in range(q.nlevels):
        assert set(q.level(l).tolist()) == set(m.level(l).tolist())
