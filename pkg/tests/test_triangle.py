"""triangle: block searches over orbit graphs, configuration validation,
and the collapse driver that funnels symmetric non-bipartite quotients
into the loop engine."""

import pytest

from ppforge.errors import InternalCheckError, PreconditionError
from ppforge.relcore import Digraph, PermGroup, Relation, or_relation, quotient
from ppforge.triangle import (
    OneBOutcome,
    StrongConfiguration,
    TreeExpression,
    TriangleConfiguration,
    one_b_driver,
    triangle_config_search,
    validate_triangle_config,
)


def complete(n):
    return Digraph(n, [(a, b) for a in range(n) for b in range(n) if a != b])


def dcycle(n):
    return Digraph(n, [(i, (i + 1) % n) for i in range(n)])


def scycle(n):
    e = [(i, (i + 1) % n) for i in range(n)]
    return Digraph(n, e + [(b, a) for a, b in e])


def two_triangles():
    e = [(a, b) for a in range(3) for b in range(3) if a != b]
    return Digraph(6, e + [(a + 3, b + 3) for a, b in e])


def uset(rel):
    assert rel.arity == 1
    return {t[0] for t in rel.tuples}


SWAP6 = (3, 4, 5, 0, 1, 2)


# ---------------------------------------------------------------------------
# tree expressions


def test_tree_expression_evaluation():
    d = scycle(5)
    full = TreeExpression.full()
    s0 = TreeExpression.singleton(0)
    assert full.evaluate(d) == frozenset(range(5))
    assert s0.evaluate(d) == frozenset({0})
    assert TreeExpression.forward(s0).evaluate(d) == frozenset({1, 4})
    two = TreeExpression.forward(TreeExpression.forward(s0))
    assert two.evaluate(d) == frozenset({0, 2, 3})
    met = TreeExpression.meet(two, TreeExpression.forward(s0))
    assert met.evaluate(d) == frozenset()


def test_tree_expression_shared_subtrees():
    d = complete(4)
    s = TreeExpression.singleton(2)
    f = TreeExpression.forward(s)
    expr = TreeExpression.meet(f, TreeExpression.forward(f))
    # N(2) = {0,1,3}, N(N(2)) = everything
    assert expr.evaluate(d) == frozenset({0, 1, 3})


# ---------------------------------------------------------------------------
# configuration search


def test_search_two_disjoint_triangles_with_swap():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    res = triangle_config_search(d, G)
    tc = res["config"]
    assert tc.k == 1
    assert uset(tc.p0) == {0, 3}
    assert uset(tc.p1) == {1, 4}
    assert uset(tc.p2) == {2, 5}
    assert uset(tc.p) == set(range(6))
    assert validate_triangle_config(d, G, tc) == []
    assert res["notes"]["recursions"] == 0
    res["trace"].replay()


def test_search_c6_antipodal():
    d = scycle(6)
    G = PermGroup([SWAP6], 6)
    res = triangle_config_search(d, G)
    tc = res["config"]
    assert tc.k == 1
    assert uset(tc.p0) == {0, 3}
    assert uset(tc.p1) == {1, 4}
    assert uset(tc.p2) == {2, 5}
    # the other blocks are exactly the out-neighborhood of the first
    succ = {v: set() for v in range(6)}
    for a, b in d.edges.tuples:
        succ[a].add(b)
    plus0 = set().union(*(succ[v] for v in uset(tc.p0)))
    assert plus0 == {1, 2, 4, 5}
    assert validate_triangle_config(d, G, tc) == []


def test_search_k3_trivial_is_singleton_blocks():
    res = triangle_config_search(complete(3))
    tc = res["config"]
    assert tc.k == 1
    assert [uset(b) for b in tc.blocks] == [{0}, {1}, {2}]
    assert uset(tc.p) == {0, 1, 2}
    assert validate_triangle_config(complete(3), None, tc) == []


def test_search_c5_powers_and_recurses():
    d = scycle(5)
    res = triangle_config_search(d)
    tc = res["config"]
    assert tc.k == 3
    assert [uset(b) for b in tc.blocks] == [{0}, {1}, {4}]
    assert uset(tc.p) == {0, 1, 4}
    assert res["notes"]["recursions"] == 2
    assert res["notes"]["recursion_depth"] == 2
    assert validate_triangle_config(d, None, tc) == []
    res["trace"].replay()


def test_search_k4_recurses_once():
    d = complete(4)
    res = triangle_config_search(d)
    tc = res["config"]
    assert tc.k == 1
    assert [uset(b) for b in tc.blocks] == [{0}, {1}, {3}]
    assert res["notes"]["recursions"] >= 1
    assert validate_triangle_config(d, None, tc) == []


def test_search_disconnected_quotient_descends_into_odd_component():
    # a triangle next to a pentagon; the two-step neighborhood of a
    # triangle vertex is a proper ground set
    e = [(a, b) for a in range(3) for b in range(3) if a != b]
    e += [(3 + i, 3 + (i + 1) % 5) for i in range(5)]
    e += [(3 + (i + 1) % 5, 3 + i) for i in range(5)]
    d = Digraph(8, e)
    res = triangle_config_search(d)
    tc = res["config"]
    assert uset(tc.p) == {0, 1, 2}
    assert [uset(b) for b in tc.blocks] == [{0}, {1}, {2}]
    assert res["notes"]["recursions"] >= 1
    assert validate_triangle_config(d, None, tc) == []
    res["trace"].replay()


def test_search_odd_cycles_with_trivial_group():
    for n in (7, 9):
        d = scycle(n)
        res = triangle_config_search(d)
        tc = res["config"]
        assert validate_triangle_config(d, None, tc) == []
        assert tc.k >= 1
        res["trace"].replay()


def test_strong_configuration_matches_orbit_graph():
    d = scycle(6)
    G = PermGroup([SWAP6], 6)
    res = triangle_config_search(d, G)
    sc = res["strong"]
    q = res["orbit_graph"]
    assert isinstance(sc, StrongConfiguration)
    assert sc.blocks == (frozenset({0}), frozenset({1}), frozenset({2}))
    for block, expr in zip(sc.blocks, sc.expressions):
        assert expr.evaluate(q) == block
    # blocks are independent and mutually adjacent in the orbit graph
    for i, b in enumerate(sc.blocks):
        nb = {w for v in b for w in q.successors(v)}
        assert not (nb & b)
        for j, other in enumerate(sc.blocks):
            if i != j:
                assert other <= nb


def test_search_trace_lifts_every_block():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    res = triangle_config_search(d, G)
    tc = res["config"]
    steps = res["steps"]
    trace = res["trace"]
    trace.replay()
    assert uset(trace[steps["P0"]].relation) == uset(tc.p0)
    assert uset(trace[steps["P1"]].relation) == uset(tc.p1)
    assert uset(trace[steps["P2"]].relation) == uset(tc.p2)
    assert uset(trace[steps["P"]].relation) == uset(tc.p)


def test_search_trace_rejects_tampered_edge():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    res = triangle_config_search(d, G)
    wrong = scycle(6).edges
    with pytest.raises(InternalCheckError):
        res["trace"].replay(inputs={res["steps"]["edge"]: wrong})


def test_search_preconditions():
    with pytest.raises(PreconditionError):
        triangle_config_search(Digraph(3, [(0, 1), (1, 0)]))  # not smooth
    with pytest.raises(PreconditionError):
        triangle_config_search(dcycle(3))  # quotient not symmetric
    with pytest.raises(PreconditionError):
        triangle_config_search(dcycle(3), PermGroup([(1, 2, 0)], 3))  # quotient loop
    with pytest.raises(PreconditionError):
        triangle_config_search(scycle(4))  # bipartite
    with pytest.raises(PreconditionError):
        triangle_config_search(scycle(6))  # bipartite without the antipodal group
    with pytest.raises(PreconditionError):
        triangle_config_search(two_triangles(), PermGroup([(3, 1, 2, 0, 4, 5)], 6))


# ---------------------------------------------------------------------------
# validation


def test_validate_accepts_search_output():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    tc = triangle_config_search(d, G)["config"]
    assert validate_triangle_config(d, G, tc) == []


def test_validate_flags_duplicate_blocks():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    tc = triangle_config_search(d, G)["config"]
    bad = TriangleConfiguration(tc.p, tc.p0, tc.p0, tc.p2, tc.k)
    out = validate_triangle_config(d, G, bad)
    assert any("partition" in v for v in out)


def test_validate_flags_edge_inside_block():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    mk = lambda vs: Relation(1, frozenset((v,) for v in vs))
    bad = TriangleConfiguration(mk(range(6)), mk({0, 1}), mk({2, 5}), mk({3, 4}), 1)
    out = validate_triangle_config(d, G, bad)
    assert any(v == "block 0 is not independent" for v in out)
    assert any(v == "block 2 is not independent" for v in out)


def test_validate_flags_bad_power_and_carrier():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    tc = triangle_config_search(d, G)["config"]
    assert validate_triangle_config(d, G, TriangleConfiguration(tc.p, tc.p0, tc.p1, tc.p2, 0)) == [
        "the power must be at least 1"
    ]
    mk = lambda vs: Relation(1, frozenset((v,) for v in vs))
    # carrier not group invariant
    bad = TriangleConfiguration(mk({0, 1, 2}), mk({0}), mk({1}), mk({2}), 1)
    out = validate_triangle_config(d, G, bad)
    assert any("invariant" in v for v in out)


# ---------------------------------------------------------------------------
# the collapse driver


def test_one_b_c6_antipodal_end_to_end():
    d = scycle(6)
    G = PermGroup([SWAP6], 6)
    out = one_b_driver(d, G)
    assert isinstance(out, OneBOutcome)
    assert out.kind == "OR_WITNESS"
    assert out.class_reps == (0, 1, 2)
    assert out.class_of[3] == 0 and out.class_of[4] == 1 and out.class_of[5] == 2
    pairs = {(0, 3), (3, 0), (1, 4), (4, 1), (2, 5), (5, 2)}
    pairs |= {(v, v) for v in range(6)}
    assert out.sim.tuples == frozenset(pairs)
    assert out.carrier == frozenset({0, 1, 3, 4})
    expect_alpha = frozenset(
        [(0, 0), (0, 3), (3, 0), (3, 3), (1, 1), (1, 4), (4, 1), (4, 4)]
    )
    assert out.alpha.tuples == expect_alpha
    assert out.relation == or_relation(out.alpha, out.alpha, 6, universe=out.carrier)
    assert out.group_b.order == 1
    assert out.notes["collapsed_size"] == 3
    assert out.notes["kernel_added_orbits"] == 3
    assert out.notes["kernel_alternatives"] == 1
    assert out.outcome.kind == "OR_WITNESS"
    assert out.outcome.parameters == (0, 1, 2)
    out.trace.replay()
    out.outcome.trace.replay()


def test_one_b_k3_trivial_quotient_is_graph_itself():
    out = one_b_driver(complete(3))
    assert out.kind == "OR_WITNESS"
    assert out.notes["collapsed_size"] == 3
    assert out.sim.tuples == frozenset((v, v) for v in range(3))
    assert out.carrier == frozenset({0, 1})
    assert out.relation == or_relation(out.alpha, out.alpha, 3, universe=out.carrier)
    assert [uset(b) for b in out.config.blocks] == [{0}, {1}, {2}]
    out.trace.replay()


def test_one_b_two_triangles_swap():
    d = two_triangles()
    G = PermGroup([SWAP6], 6)
    out = one_b_driver(d, G)
    assert out.kind == "OR_WITNESS"
    assert out.class_reps == (0, 1, 2)
    assert out.carrier == frozenset({0, 1, 3, 4})
    assert (0, 3) in out.sim.tuples and (2, 5) in out.sim.tuples
    assert out.relation == or_relation(out.alpha, out.alpha, 6, universe=out.carrier)


def test_one_b_c5_composes_with_the_power():
    out = one_b_driver(scycle(5))
    assert out.kind == "OR_WITNESS"
    assert out.config.k == 3
    assert out.carrier == frozenset({0, 1})
    assert out.notes["collapsed_size"] == 3


def test_one_b_quotient_loop_shortcut():
    out = one_b_driver(dcycle(3), PermGroup([(1, 2, 0)], 3))
    assert out.kind == "QUOTIENT_LOOP"
    assert out.config is None
    assert out.outcome.kind == "QUOTIENT_LOOP"
    assert out.outcome.quotient_class == frozenset({0, 1, 2})
    assert out.notes["shortcut"] == "quotient loop"
    assert out.class_reps == (0, 1, 2)


def test_one_b_rotated_c6_hits_the_shortcut():
    G = PermGroup([(1, 2, 3, 4, 5, 0)], 6)
    out = one_b_driver(scycle(6), G)
    assert out.kind == "QUOTIENT_LOOP"
    assert out.outcome.quotient_class == frozenset(range(6))


def test_one_b_preconditions():
    with pytest.raises(PreconditionError):
        one_b_driver(scycle(6))  # bipartite quotient
    with pytest.raises(PreconditionError):
        one_b_driver(dcycle(3))  # quotient not symmetric
    with pytest.raises(PreconditionError):
        one_b_driver(Digraph(3, [(0, 1), (1, 0)]))  # not smooth
    with pytest.raises(PreconditionError):
        one_b_driver(two_triangles(), PermGroup([(3, 1, 2, 0, 4, 5)], 6))


def test_one_b_collapse_trace_records_the_reduction():
    d = scycle(6)
    G = PermGroup([SWAP6], 6)
    out = one_b_driver(d, G)
    steps = out.notes["steps"]
    out.trace.replay()
    assert len(steps["legs"]) == 3
    ep = out.trace[steps["edge_on_carrier"]].relation
    assert ep.tuples == d.edges.tuples  # k=1 and the carrier is everything
    kernel = out.trace[steps["kernel"]].relation
    # the recorded kernel is the pre-closure core, contained in the kernel
    assert kernel.tuples <= out.sim.tuples
    meet = out.trace[steps["meet"]].relation
    assert all((v, v) in meet.tuples for v in range(6))
    with pytest.raises(InternalCheckError):
        out.trace.replay(inputs={steps["edge"]: dcycle(6).edges})


def test_one_b_odd_cycles_sweep():
    for n in (7, 9):
        out = one_b_driver(scycle(n))
        assert out.kind == "OR_WITNESS"
        assert out.relation == or_relation(out.alpha, out.alpha, n, universe=out.carrier)
        out.trace.replay()
        out.outcome.trace.replay()
