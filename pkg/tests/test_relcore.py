"""relcore: compose/or/group/quotient/core against brute-force oracles."""

import itertools
import random

import pytest

from ppforge.errors import BudgetExceeded, ParseError, PreconditionError
from ppforge.relcore import (
    Digraph,
    OrbitRelationO,
    PermGroup,
    RankedGroup,
    Relation,
    Structure,
    apply_perm,
    automorphism_group,
    compose,
    endomorphisms,
    format_digraph,
    format_group,
    format_structure_json,
    group_closure,
    is_core,
    is_subdirect,
    or_relation,
    parse_digraph,
    parse_group,
    parse_structure_json,
    perm_inverse,
    perm_power,
    quotient,
    relation_power,
    transport_relation,
)


def k3():
    return Digraph(3, [(a, b) for a in range(3) for b in range(3) if a != b])


def c6():
    return Digraph(6, [(i, (i + 1) % 6) for i in range(6)] + [((i + 1) % 6, i) for i in range(6)])


def two_triangles():
    e = []
    for base in (0, 3):
        for a in range(3):
            for b in range(3):
                if a != b:
                    e.append((base + a, base + b))
    return Digraph(6, e)


# ---------------------------------------------------------------------------
# composition


def compose_oracle(R, S):
    out = set()
    for x, y in R.tuples:
        for y2, z in S.tuples:
            if y == y2:
                out.add((x, z))
    return Relation(2, frozenset(out))


def test_compose_matches_triple_loop_oracle():
    rng = random.Random(11)
    for n in range(1, 6):
        for _ in range(40):
            pairs = list(itertools.product(range(n), repeat=2))
            R = Relation.make(2, rng.sample(pairs, rng.randint(0, len(pairs))))
            S = Relation.make(2, rng.sample(pairs, rng.randint(0, len(pairs))))
            assert compose(R, S) == compose_oracle(R, S)


def test_compose_unary_variant():
    B = Relation.make(1, [(0,), (2,)])
    R = Relation.make(2, [(0, 1), (2, 2), (1, 0)])
    assert compose(B, R) == Relation.make(1, [(1,), (2,)])


def test_relation_power_is_walk_relation():
    d = c6()
    sq = relation_power(d.edges, 2)
    # C6 squared: distance-0-or-2 pairs
    expected = set()
    for a in range(6):
        expected.add((a, a))
        expected.add((a, (a + 2) % 6))
        expected.add((a, (a - 2) % 6))
    assert sq.tuples == frozenset(expected)


def test_is_subdirect():
    assert is_subdirect(k3().edges, 3)
    assert not is_subdirect(Relation.make(2, [(0, 1)]), 3)


# ---------------------------------------------------------------------------
# or_relation


def test_or_relation_of_equalities_has_12_of_16():
    eq = Relation.equality(2)
    o = or_relation(eq, eq, 2)
    assert o.arity == 4
    assert len(o) == 12
    for t in itertools.product(range(2), repeat=4):
        expected = t[0] == t[1] or t[2] == t[3]
        assert (t in o) == expected


def test_or_relation_budget():
    full = Relation.full(3, 5)
    with pytest.raises(BudgetExceeded):
        or_relation(full, full, 5, budget=10)


# ---------------------------------------------------------------------------
# groups


def test_group_closure_rotation():
    G = group_closure([(1, 2, 0)], 3)
    assert G.order == 3
    assert (2, 0, 1) in G
    assert (1, 0, 2) not in G


def test_rotation_two_orbit_partition():
    G = group_closure([(1, 2, 0)], 3)
    orbs = {frozenset(o) for o in G.orbits(2)}
    assert orbs == {
        frozenset({(0, 0), (1, 1), (2, 2)}),
        frozenset({(0, 1), (1, 2), (2, 0)}),
        frozenset({(0, 2), (1, 0), (2, 1)}),
    }
    assert G.n_orbits(2) == 3


def test_orbits_partition_small_random_groups():
    rng = random.Random(5)
    for n in range(2, 7):
        perms = [tuple(rng.sample(range(n), n)) for _ in range(2)]
        G = group_closure(perms, n)
        for k in (1, 2, 3):
            orbs = G.orbits(k)
            seen = set()
            for o in orbs:
                assert not (seen & o)
                seen.update(o)
            assert len(seen) == n ** k


def test_group_cap():
    with pytest.raises(BudgetExceeded):
        # symmetric group on 9 points has 362880 > 1000 elements
        group_closure([tuple(range(1, 9)) + (0,), (1, 0) + tuple(range(2, 9))], 9, cap=1000)


def test_orbit_relation_membership_matches_group():
    rng = random.Random(7)
    for n in range(2, 7):
        G = group_closure([tuple(rng.sample(range(n), n))], n)
        O = OrbitRelationO(G)
        for _ in range(50):
            t = tuple(rng.randrange(n) for _ in range(n))
            assert (t in O) == (t in G._elemset)
        assert O.as_relation().tuples == frozenset(G.elements)


def test_orbit_relation_virtual_above_limit():
    G = PermGroup.trivial(9)
    with pytest.raises(BudgetExceeded):
        OrbitRelationO(G).as_relation()


def test_perm_power_and_inverse():
    g = (1, 2, 3, 0)
    assert perm_power(g, 2) == (2, 3, 0, 1)
    assert perm_power(g, -1) == perm_inverse(g) == (3, 0, 1, 2)
    assert perm_power(g, 0) == (0, 1, 2, 3)
    assert perm_power(g, 4) == (0, 1, 2, 3)


def test_ranked_group_families():
    g = (1, 2, 0)
    const = RankedGroup("constant", g, 3)
    geo = RankedGroup("geometric", g, 3)
    assert const.member(5) == g
    assert geo.member(2) == perm_power(g, 2)
    assert geo.member(-1) == perm_inverse(g)
    R = Relation.make(2, [(0, 1), (1, 2), (2, 0)])
    # the rotation graph is invariant under g applied pointwise...
    assert const.leaves_invariant(R, (0, 1))
    # ...but not when a geometric family shifts one coordinate further
    assert not geo.leaves_invariant(R, (0, 1))
    # rank 0 on both coordinates is the identity action
    assert geo.acts_on_ranked(R, (0, 0)) == R


# ---------------------------------------------------------------------------
# quotients


def test_quotient_c6_antipodal_is_k3():
    d = c6()
    G = group_closure([(3, 4, 5, 0, 1, 2)], 6)
    q, orbit_of = quotient(d, G)
    assert q.domain_size == 3
    assert q.edges.tuples == k3().edges.tuples
    assert orbit_of == [0, 1, 2, 0, 1, 2]


def test_quotient_two_triangles_swap_is_k3():
    d = two_triangles()
    G = group_closure([(3, 4, 5, 0, 1, 2)], 6)
    q, orbit_of = quotient(d, G)
    assert q.edges.tuples == k3().edges.tuples
    assert orbit_of == [0, 1, 2, 0, 1, 2]


def test_quotient_rejects_nonpreserving_group():
    d = Digraph(3, [(0, 1)])
    with pytest.raises(PreconditionError) as ei:
        quotient(d, group_closure([(1, 0, 2)], 3))
    msg = str(ei.value)
    assert "(0, 1)" in msg and "(1, 0, 2)" in msg


def test_quotient_structure_with_unary():
    s = Structure(
        4,
        {
            "E": Relation.make(2, [(0, 1), (1, 0), (2, 3), (3, 2)]),
            "P": Relation.make(1, [(0,), (2,)]),
        },
    )
    G = group_closure([(2, 3, 0, 1)], 4)
    q, orbit_of = quotient(s, G)
    assert q.domain_size == 2
    assert q.relations["P"] == Relation.make(1, [(0,)])
    assert orbit_of == [0, 1, 0, 1]


# ---------------------------------------------------------------------------
# endomorphisms and cores


def test_k3_is_core_with_six_automorphisms():
    s = k3().as_structure()
    ends = endomorphisms(s)
    assert len(ends) == 6
    assert all(len(set(m)) == 3 for m in ends)
    assert is_core(s)
    assert automorphism_group(s).order == 6


def test_c6_is_not_core():
    s = c6().as_structure()
    assert not is_core(s)
    # a fold onto one edge is among the endomorphisms
    parity = tuple(v % 2 for v in range(6))
    assert parity in endomorphisms(s)


def test_single_loop_is_core():
    s = Digraph(1, [(0, 0)]).as_structure()
    assert is_core(s)
    assert endomorphisms(s) == [(0,)]


def test_endomorphism_oracle_small_random():
    rng = random.Random(3)
    for _ in range(20):
        n = rng.randint(1, 4)
        edges = [
            (a, b) for a in range(n) for b in range(n) if rng.random() < 0.5
        ]
        s = Digraph(n, edges).as_structure()
        got = set(endomorphisms(s))
        want = set()
        for m in itertools.product(range(n), repeat=n):
            if all((m[a], m[b]) in s.relations["E"] for a, b in edges):
                want.add(m)
        assert got == want


def test_transport_relation():
    R = Relation.make(2, [(0, 1), (1, 2)])
    g = (1, 2, 0)
    assert transport_relation(R, g) == Relation.make(2, [(1, 2), (2, 0)])
    t = (0, 1, 1)
    assert apply_perm(g, t) == (1, 2, 2)


# ---------------------------------------------------------------------------
# file formats


def test_digraph_roundtrip():
    text = "# a triangle\ndigraph 3\n0 1\n1 2\n2 0\n"
    d = parse_digraph(text)
    assert d.domain_size == 3
    assert d.edges == Relation.make(2, [(0, 1), (1, 2), (2, 0)])
    assert parse_digraph(format_digraph(d)) == d


def test_graph_header_symmetrizes():
    d = parse_digraph("graph 3\n0 1\n1 2\n")
    assert d.is_symmetric()
    assert (1, 0) in d.edges and (2, 1) in d.edges


def test_digraph_parse_errors_carry_line():
    with pytest.raises(ParseError) as ei:
        parse_digraph("digraph 3\n0 9\n")
    assert ei.value.line == 2
    with pytest.raises(ParseError):
        parse_digraph("")
    with pytest.raises(ParseError):
        parse_digraph("graph x\n")


def test_structure_json_roundtrip():
    s = Structure(
        3,
        {"E": Relation.make(2, [(0, 1), (1, 2)]), "P": Relation.make(1, [(2,)])},
    )
    text = format_structure_json(s)
    assert parse_structure_json(text) == s


def test_structure_json_errors():
    with pytest.raises(ParseError):
        parse_structure_json("{")
    with pytest.raises(ParseError):
        parse_structure_json('{"domain": 2}')
    with pytest.raises(ParseError):
        parse_structure_json('{"domain": 2, "relations": {"E": {"arity": 2, "tuples": [[0]]}}}')


def test_group_file_roundtrip():
    G = group_closure([(1, 2, 0)], 3)
    text = format_group(G)
    G2 = parse_group(text, 3)
    assert G2.elements == G.elements
    with pytest.raises(ParseError):
        parse_group("perm 3: 0 0 1\n", 3)
    with pytest.raises(ParseError):
        parse_group("perm 4: 0 1 2 3\n", 3)


def test_digraph_restrict_reindexes_sorted():
    d = c6()
    sub, embed = d.restrict([4, 0, 2])
    assert embed == [0, 2, 4]
    assert sub.domain_size == 3
    # C6 has no edges among {0,2,4}
    assert len(sub.edges) == 0


def test_group_restrict():
    G = group_closure([(3, 4, 5, 0, 1, 2)], 6)
    H = G.restrict([0, 3])
    assert H.domain_size == 2
    assert H.order == 2
    with pytest.raises(PreconditionError):
        G.restrict([0, 1])  # not invariant: orbit of 0 is {0,3}
