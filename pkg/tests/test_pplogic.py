"""pplogic: evaluator vs exhaustive oracle, grammar round-trips, ranking
checks, translation soundness."""

import random

import pytest

from ppforge.errors import BudgetExceeded, ParseError, PreconditionError, UnknownRelation
from ppforge.pplogic import (
    Atom,
    EvalEnv,
    RPPFormula,
    evaluate,
    evaluate_by_enumeration,
    format_formula,
    make_formula,
    make_link_formulas,
    parse_formula,
    rpp_to_pp,
    validate_ranking,
)
from ppforge.relcore import (
    Digraph,
    PermGroup,
    Relation,
    group_closure,
    perm_power,
    transport_relation,
)


def random_relation(rng, n, arity, density=0.35):
    tuples = []

    def rec(t):
        if len(t) == arity:
            if rng.random() < density:
                tuples.append(tuple(t))
            return
        for x in range(n):
            rec(t + [x])

    rec([])
    return Relation.make(arity, tuples)


def random_formula(rng, n, rel_arities, group_size):
    n_free = rng.randint(0, 3)
    n_bound = rng.randint(0, 6 - n_free)
    free = tuple(f"x{i}" for i in range(n_free))
    bound = tuple(f"z{i}" for i in range(n_bound))
    allv = free + bound
    atoms = []
    if allv:
        for _ in range(rng.randint(1, 5)):
            kind = rng.random()
            if kind < 0.55:
                name = rng.choice(list(rel_arities))
                ar = rel_arities[name]
                atoms.append(Atom.rel(name, *(rng.choice(allv) for _ in range(ar))))
            elif kind < 0.7:
                atoms.append(Atom.eq(rng.choice(allv), rng.choice(allv)))
            elif kind < 0.85:
                atoms.append(Atom.param(rng.randrange(n), rng.choice(allv)))
            elif group_size and len(allv) >= 1:
                atoms.append(Atom.orbit(*(rng.choice(allv) for _ in range(n))))
            else:
                atoms.append(Atom.eq(rng.choice(allv), rng.choice(allv)))
    return make_formula(free, bound, atoms)


def test_evaluate_matches_enumeration_on_random_formulas():
    rng = random.Random(2024)
    for trial in range(120):
        n = rng.randint(2, 5)
        rels = {
            "E": random_relation(rng, n, 2, 0.4),
            "R": random_relation(rng, n, rng.randint(1, 3), 0.3),
        }
        perm = tuple(rng.sample(range(n), n))
        G = group_closure([perm], n)
        env = EvalEnv(n, rels, group=G)
        f = random_formula(rng, n, {"E": 2, "R": rels["R"].arity}, G.order)
        assert evaluate(f, env) == evaluate_by_enumeration(f, env), format_formula(f)


def test_evaluate_empty_free_tuple_semantics():
    env = EvalEnv(3, {"E": Relation.make(2, [(0, 1)])})
    f = make_formula((), ("a", "b"), [Atom.rel("E", "a", "b")])
    assert evaluate(f, env) == Relation(0, frozenset({()}))
    f2 = make_formula((), ("a",), [Atom.rel("E", "a", "a")])
    assert evaluate(f2, env) == Relation(0, frozenset())


def test_evaluate_unknown_relation():
    env = EvalEnv(2, {})
    f = make_formula(("x",), (), [Atom.rel("Q", "x")])
    with pytest.raises(UnknownRelation):
        evaluate(f, env)


def test_evaluate_budget():
    n = 5
    env = EvalEnv(n, {"E": Relation.full(2, n)})
    f = make_formula(
        tuple(f"x{i}" for i in range(3)),
        tuple(f"z{i}" for i in range(3)),
        [Atom.rel("E", "x0", "z0"), Atom.rel("E", "z1", "z2")],
    )
    with pytest.raises(BudgetExceeded):
        evaluate(f, env, budget=10)


def test_repeated_free_variable_projection():
    # S(x,x) style atoms: diagonal of a binary relation
    env = EvalEnv(3, {"S": Relation.make(2, [(0, 0), (1, 2), (2, 2)])})
    f = make_formula(("x",), (), [Atom.rel("S", "x", "x")])
    assert evaluate(f, env) == Relation.make(1, [(0,), (2,)])


def test_param_atom_pins_value():
    env = EvalEnv(4, {"E": Relation.make(2, [(1, 2), (1, 3), (0, 2)])})
    f = make_formula(("y",), ("x",), [Atom.param(1, "x"), Atom.rel("E", "x", "y")])
    assert evaluate(f, env) == Relation.make(1, [(2,), (3,)])


def test_orbit_atom_semantics():
    G = group_closure([(1, 2, 0)], 3)
    env = EvalEnv(3, {}, group=G)
    f = make_formula(("a", "b", "c"), (), [Atom.orbit("a", "b", "c")])
    got = evaluate(f, env)
    assert got.tuples == frozenset(G.elements)
    # projection of the orbit atom: images of point 1
    f2 = make_formula(("b",), ("a", "c"), [Atom.orbit("a", "b", "c")])
    assert evaluate(f2, env) == Relation.make(1, [(0,), (1,), (2,)])


# ---------------------------------------------------------------------------
# grammar


def test_parse_format_roundtrip_byte_identical():
    texts = [
        "(pp (free x0 x1) (exist z0) (and (atom E x0 z0) (atom E z0 x1)))",
        "(pp (free) (exist a b) (and (eq a b) (param 3 b)))",
        "(pp (free x) (exist) (rank (x 2)) (and (atom R x x x)))",
        "(pp (free u v w) (exist) (and (orbitO u v w)))",
    ]
    for t in texts:
        f = parse_formula(t)
        out = format_formula(f)
        assert parse_formula(out) == f
        assert format_formula(parse_formula(out)) == out


def test_parse_errors_report_position():
    with pytest.raises(ParseError) as ei:
        parse_formula("(pp (free x)\n (exist) (and (atom)))")
    assert ei.value.line == 2
    with pytest.raises(ParseError):
        parse_formula("(pp (free x) (exist) (and (eq x)))")
    with pytest.raises(ParseError):
        parse_formula("(pp (free x) (exist))")
    with pytest.raises(ParseError):
        parse_formula("(qq (free) (exist) (and))")
    with pytest.raises(ParseError):
        parse_formula("(pp (free x) (exist x) (and))")
    with pytest.raises(ParseError) as ei2:
        parse_formula("(pp (free x) (exist) (and (param y x)))")
    assert "integer" in str(ei2.value)


def test_random_formula_roundtrip():
    rng = random.Random(77)
    for _ in range(60):
        f = random_formula(rng, 4, {"E": 2, "R": 3}, group_size=0)
        f = RPPFormula(f.free_vars, f.bound_vars, f.atoms,
                       {v: rng.randint(-2, 3) for v in f.all_vars if rng.random() < 0.4})
        text = format_formula(f)
        assert parse_formula(text) == f


# ---------------------------------------------------------------------------
# ranking validation


def test_validate_ranking_accepts_consistent_shifts():
    f = make_formula(
        ("x",), ("y", "z"),
        [Atom.rel("E", "x", "y"), Atom.rel("E", "y", "z"), Atom.rel("R", "z", "z")],
        {"x": 0, "y": 1, "z": 2},
    )
    validate_ranking(f, {"E": (0, 1), "R": (0, 0)})


def test_validate_ranking_reports_first_violation():
    f = make_formula(
        ("x",), ("y",),
        [Atom.rel("E", "x", "y")],
        {"x": 0, "y": 0},
    )
    with pytest.raises(PreconditionError) as ei:
        validate_ranking(f, {"E": (0, 1)})
    assert "atom 0" in str(ei.value)
    f2 = make_formula(("x", "y"), (), [Atom.eq("x", "y")], {"x": 0, "y": 1})
    with pytest.raises(PreconditionError):
        validate_ranking(f2, {})
    f3 = make_formula(("x", "y"), (), [Atom.orbit("x", "y")], {"x": 0, "y": 1})
    with pytest.raises(PreconditionError):
        validate_ranking(f3, {})


# ---------------------------------------------------------------------------
# translation soundness


def twisted_edges(d: Digraph, g):
    return Relation(2, frozenset((x, g[y]) for x, y in d.edges.tuples))


def random_ranked_formula(rng, n, names_arity):
    n_free = rng.randint(1, 2)
    n_bound = rng.randint(0, 3)
    free = tuple(f"x{i}" for i in range(n_free))
    bound = tuple(f"z{i}" for i in range(n_bound))
    allv = list(free + bound)
    ranks = {v: 0 for v in free}
    for v in bound:
        ranks[v] = rng.randint(-1, 2)
    atoms = []
    for _ in range(rng.randint(1, 4)):
        roll = rng.random()
        if roll < 0.45:
            # edge atom between consecutive ranks if such a pair exists
            pairs = [(u, v) for u in allv for v in allv if ranks[v] == ranks[u] + 1]
            if pairs:
                u, v = rng.choice(pairs)
                atoms.append(Atom.rel("Ep", u, v))
                continue
            roll = 0.6
        if roll < 0.75:
            name = rng.choice([k for k in names_arity if k != "Ep"])
            ar = names_arity[name]
            groups = {}
            for v in allv:
                groups.setdefault(ranks[v], []).append(v)
            rank_choice = rng.choice(list(groups))
            pool = groups[rank_choice]
            atoms.append(Atom.rel(name, *(rng.choice(pool) for _ in range(ar))))
        elif roll < 0.9:
            atoms.append(Atom.param(rng.randrange(n), rng.choice(allv)))
        else:
            grouped = {}
            for v in allv:
                grouped.setdefault(ranks[v], []).append(v)
            pool = grouped[rng.choice(list(grouped))]
            u, v = rng.choice(pool), rng.choice(pool)
            atoms.append(Atom.eq(u, v))
    return make_formula(free, bound, atoms, ranks)


def test_rpp_to_pp_preserves_evaluation():
    rng = random.Random(4096)
    done = 0
    while done < 20:
        n = rng.randint(3, 6)
        rot = tuple((i + 1) % n for i in range(n))
        # a rotation-invariant digraph: union of difference classes
        diffs = [d for d in range(n) if rng.random() < 0.5] or [1]
        edges = [(i, (i + d) % n) for i in range(n) for d in diffs]
        d = Digraph(n, edges)
        Ep = twisted_edges(d, rot)
        rels_prime = {
            "Ep": Ep,
            "R": random_relation(rng, n, rng.randint(1, 2), 0.4),
            "S": random_relation(rng, n, 2, 0.4),
        }
        f = random_ranked_formula(rng, n, {k: v.arity for k, v in rels_prime.items()})
        validate_ranking(
            f, {"Ep": (0, 1), "R": (0,) * rels_prime["R"].arity, "S": (0, 0)}
        )
        env_prime = EvalEnv(n, rels_prime)
        want = evaluate(f, env_prime)

        plain, extra = rpp_to_pp(
            f, rot, rels_prime, edge_names=("Ep",),
            base_rankings={"Ep": (0, 1)},
        )
        # plain world: Ep-atoms must now be read over the original edges
        env_plain = EvalEnv(n, {**rels_prime, **extra, "Ep": d.edges})
        got = evaluate(plain, env_plain)
        assert got == want, format_formula(f)
        done += 1


def test_rpp_to_pp_transports_params():
    n = 4
    rot = (1, 2, 3, 0)
    f = make_formula(("x",), (), [Atom.param(2, "x")], {"x": 1})
    plain, extra = rpp_to_pp(f, rot, {})
    # x stood for g^-1 of its value, so the pin moves to g^-1(2) = 1
    assert plain.atoms[0] == Atom.param(1, "x")
    assert not extra


def test_rpp_to_pp_creates_transport_steps():
    n = 3
    rot = (1, 2, 0)
    R = Relation.make(1, [(0,), (1,)])
    f = make_formula(("x",), (), [Atom.rel("R", "x")], {"x": 2})
    plain, extra = rpp_to_pp(f, rot, {"R": R})
    assert plain.atoms[0].name == "R@2"
    assert extra["R@2"] == transport_relation(R, perm_power(rot, -2))


# ---------------------------------------------------------------------------
# link formulas


def bfs_link_equivalence(d: Digraph, k: int):
    """Oracle: equivalence closure of sharing a k-walk target."""
    pk = d.power(k)
    n = d.domain_size
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for w in range(n):
        ins = [x for x in range(n) if (x, w) in pk.edges]
        for a in ins[1:]:
            ra, rb = find(a), find(ins[0])
            if ra != rb:
                parent[ra] = rb
    return [find(x) for x in range(n)]


def test_link_formula_matches_definition():
    rng = random.Random(9)
    for _ in range(25):
        n = rng.randint(2, 6)
        d = Digraph(n, [(a, b) for a in range(n) for b in range(n) if rng.random() < 0.4])
        k = rng.randint(1, 2)
        link, closure = make_link_formulas(k, n)
        env = EvalEnv(n, {"E": d.edges})
        got = evaluate(link, env)
        pk = d.power(k)
        want = set()
        for x in range(n):
            for y in range(n):
                if any((x, w) in pk.edges and (y, w) in pk.edges for w in range(n)):
                    want.add((x, y))
        assert got.tuples == frozenset(want)


def test_closure_formula_reaches_link_classes():
    # C6 with k=1: the closure over 6 links must relate exactly the
    # same-parity pairs (two link classes)
    d = Digraph(6, [(i, (i + 1) % 6) for i in range(6)] + [((i + 1) % 6, i) for i in range(6)])
    link, closure = make_link_formulas(1, 6)
    env = EvalEnv(6, {"E": d.edges})
    got = evaluate(closure, env)
    classes = bfs_link_equivalence(d, 1)
    want = {(x, y) for x in range(6) for y in range(6) if classes[x] == classes[y]}
    assert got.tuples == frozenset(want)
    assert (0, 1) not in got.tuples


def test_link_formulas_have_valid_rankings():
    for k in (1, 2, 3):
        link, closure = make_link_formulas(k, 4)
        validate_ranking(link, {"E": (0, 1)})
        validate_ranking(closure, {"E": (0, 1)})
        assert all(link.rank(v) == 0 for v in link.free_vars)
        assert all(closure.rank(v) == 0 for v in closure.free_vars)
