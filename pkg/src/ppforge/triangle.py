"""Triangle configurations over orbit graphs.

A smooth digraph whose orbit quotient is symmetric, loopless and
non-bipartite carries three disjoint independent vertex blocks that are
mutually adjacent under a suitable edge power.  This module grows such a
triple inside the orbit graph, certifies every produced set by a formula
over the edge relation and orbit predicates, and collapses the blocks far
enough that the loop drivers of :mod:`ppforge.loopengine` apply.
"""

import itertools
from dataclasses import dataclass, field

from .dianalysis import bipartite_and_odd_girth, components_and_algebraic_length, weak_components
from .errors import InternalCheckError, PreconditionError
from .loopengine import (
    DerivationTrace,
    MainFiniteOutcome,
    _closure_relation,
    _equivalence_classes,
    is_equivalence_on,
    pseudoloop_driver,
)
from .pplogic import Atom, make_formula
from .relcore import Digraph, PermGroup, Relation, or_relation, quotient, relation_power

__all__ = [
    "TreeExpression",
    "StrongConfiguration",
    "TriangleConfiguration",
    "OneBOutcome",
    "triangle_config_search",
    "validate_triangle_config",
    "one_b_driver",
]

FULL = "full"
SINGLETON = "singleton"
NEIGHBORHOOD = "neighborhood"
INTERSECT = "intersect"


@dataclass(frozen=True)
class TreeExpression:
    """Set expression over a symmetric graph: singletons and the full set,
    closed under taking neighborhoods and binary intersections."""

    kind: str
    vertex: int = None
    child: "TreeExpression" = None
    left: "TreeExpression" = None
    right: "TreeExpression" = None

    @staticmethod
    def full() -> "TreeExpression":
        return TreeExpression(FULL)

    @staticmethod
    def singleton(u: int) -> "TreeExpression":
        return TreeExpression(SINGLETON, vertex=int(u))

    @staticmethod
    def forward(child: "TreeExpression") -> "TreeExpression":
        return TreeExpression(NEIGHBORHOOD, child=child)

    @staticmethod
    def meet(left: "TreeExpression", right: "TreeExpression") -> "TreeExpression":
        return TreeExpression(INTERSECT, left=left, right=right)

    def evaluate(self, d: Digraph, _memo=None) -> frozenset:
        """Vertex set denoted in the graph ``d``.  Shared subtrees are
        evaluated once."""
        memo = {} if _memo is None else _memo
        key = id(self)
        if key in memo:
            return memo[key]
        if self.kind == FULL:
            out = frozenset(range(d.domain_size))
        elif self.kind == SINGLETON:
            out = frozenset({self.vertex})
        elif self.kind == NEIGHBORHOOD:
            base = self.child.evaluate(d, memo)
            out = frozenset(w for v in base for w in d.successors(v))
        elif self.kind == INTERSECT:
            out = self.left.evaluate(d, memo) & self.right.evaluate(d, memo)
        else:
            raise InternalCheckError(f"unknown tree expression kind {self.kind!r}")
        memo[key] = out
        return out


@dataclass(frozen=True)
class StrongConfiguration:
    """Triple of orbit sets, each denoted by a tree expression, that is
    pairwise adjacent, independent, and connected in overlapping pairs."""

    u0: frozenset
    u1: frozenset
    u2: frozenset
    expressions: tuple

    @property
    def blocks(self):
        return (self.u0, self.u1, self.u2)


@dataclass(frozen=True)
class TriangleConfiguration:
    """Vertex-level blocks lifted from a strong configuration.  ``k`` is
    the edge power under which the conditions hold."""

    p: Relation
    p0: Relation
    p1: Relation
    p2: Relation
    k: int

    @property
    def blocks(self):
        return (self.p0, self.p1, self.p2)


@dataclass(frozen=True)
class OneBOutcome:
    """Loop-driver verdict transported through the block collapse.

    ``outcome`` is the driver result over the collapsed world; ``relation``,
    ``alpha`` and ``carrier`` are its pullbacks along the collapse (absent
    on the quotient-loop shortcut, where ``outcome`` already lives on the
    original world)."""

    kind: str
    outcome: MainFiniteOutcome
    config: TriangleConfiguration
    trace: DerivationTrace
    sim: Relation
    class_reps: tuple
    class_of: dict
    group_b: PermGroup
    relation: Relation = None
    alpha: Relation = None
    carrier: frozenset = None
    notes: dict = field(default_factory=dict)


def _unary_set(rel: Relation) -> frozenset:
    if rel.arity != 1:
        raise PreconditionError("expected a unary relation")
    return frozenset(t[0] for t in rel.tuples)


def _unary(verts, n) -> Relation:
    bad = [v for v in verts if not (0 <= v < n)]
    if bad:
        raise PreconditionError(f"vertex {bad[0]} outside the domain")
    return Relation(1, frozenset((v,) for v in verts))


def _check_group(d: Digraph, G: PermGroup):
    if G.domain_size != d.domain_size:
        raise PreconditionError("group and digraph domains differ")
    edges = d.edges.tuples
    for g in G.generators:
        if any((g[a], g[b]) not in edges for (a, b) in edges):
            raise PreconditionError("group generator is not an automorphism")


def _induced(n: int, adj: dict, sub: frozenset) -> Digraph:
    return Digraph(n, [(u, v) for u in sub for v in adj[u] & sub])


def _connected(adj: dict, sub: frozenset) -> bool:
    if not sub:
        return False
    start = min(sub)
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in adj[v] & sub:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen == sub


# ---------------------------------------------------------------------------
# orbit-graph search


class _Growth:
    """One search level: a tree-definable ground set with the one-step
    function of the ambient (already powered) graph restricted to it."""

    def __init__(self, n, anchor_set, anchor_expr, prev_step, prev_expr, stats, depth):
        self.n = n
        self.anchor = anchor_set
        self.anchor_expr = anchor_expr
        self.prev_step = prev_step
        self.prev_expr = prev_expr
        self.stats = stats
        self.depth = depth
        stats["max_depth"] = max(stats["max_depth"], depth)

    def one_step(self, m):
        """Step function and expression builder for the m-th power of the
        restriction to the anchor set."""
        anchor, expr_a = self.anchor, self.anchor_expr
        prev_step, prev_expr = self.prev_step, self.prev_expr
        plain = expr_a.kind == FULL

        def f(bs):
            cur = frozenset(bs)
            for _ in range(m):
                cur = prev_step(cur) & anchor
            return cur

        def e(x):
            cur = x
            for _ in range(m):
                step = prev_expr(cur)
                cur = step if plain else TreeExpression.meet(expr_a, step)
            return cur

        return f, e


def _search_level(growth: "_Growth"):
    """Find a saturated strong configuration on ``growth.anchor``; recurse
    into proper non-bipartite tree-definable subsets when forced."""
    n, S = growth.n, growth.anchor
    if not S:
        raise InternalCheckError("search entered an empty ground set")
    stats = growth.stats

    adj1 = {u: growth.prev_step(frozenset([u])) & S for u in S}
    if any(u in adj1[u] for u in S):
        raise InternalCheckError("search ground set carries a loop")
    bip, girth = bipartite_and_odd_girth(_induced(n, adj1, S))
    if bip:
        if growth.depth == 0:
            raise PreconditionError("the quotient is bipartite, no triple of blocks exists")
        raise InternalCheckError("recursion target turned out bipartite")
    m = girth - 2
    f, e = growth.one_step(m)
    adj = {u: f(frozenset([u])) for u in S}
    if any(u in adj[u] for u in S):
        raise InternalCheckError("edge power reintroduced a loop")

    def recurse(sub, sub_expr, why):
        if not sub or sub == S:
            return None
        dbip, _ = bipartite_and_odd_girth(_induced(n, adj, sub))
        if dbip:
            return None
        stats["recursions"] += 1
        stats.setdefault("recursion_reasons", []).append(why)
        child = _Growth(n, sub, sub_expr, f, e, stats, growth.depth + 1)
        sc, sub_k, ground = _search_level(child)
        return sc, m * sub_k, ground

    def hunt(reason):
        # last-resort sweep over tree expressions of bounded depth
        got = _tree_net(f, e, S, adj, n)
        if got is not None:
            res = recurse(got[0], got[1], f"net:{reason}")
            if res is not None:
                return res
        raise InternalCheckError(f"triangle search stalled: {reason}")

    tri = None
    for a, b, c in itertools.combinations(sorted(S), 3):
        if b in adj[a] and c in adj[a] and c in adj[b]:
            tri = (a, b, c)
            break
    if tri is None:
        return hunt("no triangle after powering")

    # a proper two-step neighborhood of a triangle vertex is a smaller
    # non-bipartite ground set; descend into the first one found
    for u in tri:
        reach = f(f(frozenset([u])))
        if reach != S:
            res = recurse(reach, e(e(TreeExpression.singleton(u))), "two_step")
            if res is not None:
                return res
            return hunt("two-step neighborhood is proper but unusable")

    U = [frozenset([tri[0]]), frozenset([tri[1]]), frozenset([tri[2]])]
    E = [TreeExpression.singleton(t) for t in tri]

    def independent(sub):
        return all(not (adj[u] & sub) for u in sub)

    def assert_strong():
        for i in range(3):
            if not U[i]:
                raise InternalCheckError("a configuration block went empty")
            if not independent(U[i]):
                raise InternalCheckError(f"block {i} lost independence")
            for j in range(3):
                if j != i and not (U[j] <= f(U[i])):
                    raise InternalCheckError(f"block {j} fell out of the neighborhood of block {i}")
        for other in (1, 2):
            if not _connected(adj, U[0] | U[other]):
                raise InternalCheckError(f"blocks 0 and {other} induce a disconnected graph")

    assert_strong()
    rounds = 0
    limit = 3 * len(S) + 6
    while True:
        rounds += 1
        stats["rounds"] += 1
        if rounds > limit:
            return hunt("growth exceeded its round bound")

        progressed = False
        for i in range(3):
            jl, jr = (i + 2) % 3, (i + 1) % 3
            cand = f(U[jl]) & f(U[jr])
            if not (cand >= U[i]):
                raise InternalCheckError("a blowup pass shrank its block")
            if cand == U[i]:
                continue
            if not independent(cand):
                # the enlarged block gained an internal edge; the whole
                # neighborhood of a remaining independent block is then a
                # proper non-bipartite ground set
                kk = 2 if i in (0, 1) else 1
                res = recurse(f(U[kk]), e(E[kk]), "blowup_dependent")
                if res is not None:
                    return res
                return hunt("dependent blowup without a usable recursion target")
            U[i] = cand
            E[i] = TreeExpression.meet(e(E[jl]), e(E[jr]))
            progressed = True
        if progressed:
            assert_strong()
            continue

        union = U[0] | U[1] | U[2]
        if union == S:
            break

        V = [f(U[i]) - U[(i + 1) % 3] - U[(i + 2) % 3] for i in range(3)]
        if not any(V):
            res = recurse(f(f(U[1])), e(e(E[1])), "saturated_union")
            if res is not None:
                return res
            return hunt("blowup saturated below the ground set")
        if not all(V):
            return hunt("only some cutoff classes are empty")
        for i in range(3):
            for j in range(3):
                if i != j and not (V[i] <= f(V[j])):
                    return hunt("cutoff adjacency failed")
            if V[i] & (U[0] | U[1] | U[2]):
                raise InternalCheckError("cutoff classes meet the blocks")
        for i in (1, 2):
            if any(adj[v] & U[i] for v in V[0]):
                raise InternalCheckError(f"stray edges between cutoff class 0 and block {i}")

        v1 = min(V[1])
        W = f(frozenset([v1])) & f(U[1])
        We = TreeExpression.meet(e(TreeExpression.singleton(v1)), e(E[1]))
        if not W:
            res = recurse(f(f(frozenset([v1]))), e(e(TreeExpression.singleton(v1))), "isolated_pivot")
            if res is not None:
                return res
            return hunt("pivot vertex shares no neighbor with its block")
        if not (W <= V[1]):
            return hunt("pivot neighborhood left its cutoff class")

        chain = [f(W) & f(U[0])]
        chain_e = [TreeExpression.meet(e(We), e(E[0]))]
        if not (U[1] < chain[0]):
            return hunt("first chain set does not properly extend its block")
        accept = None
        while accept is None:
            t = len(chain) - 1
            st = chain[t]
            base, vlow = (U[1], V[0]) if t % 2 == 0 else (U[2], V[0])
            if not (base <= st <= base | vlow):
                return hunt("chain set escaped its corridor")
            if not independent(st):
                nxt = f(st) & f(U[0])
                nxt_e = TreeExpression.meet(e(chain_e[t]), e(E[0]))
                res = recurse(
                    f(st & nxt), e(TreeExpression.meet(chain_e[t], nxt_e)), "dependent_chain"
                )
                if res is not None:
                    return res
                return hunt("dependent chain set without a usable recursion target")
            if t >= 2 and not (chain[t - 2] <= st):
                raise InternalCheckError("chain lost monotonicity")
            if t >= 2 and t % 2 == 0 and chain[t - 2] == st:
                accept = t - 2
                break
            if t > 2 * len(S) + 4:
                return hunt("chain failed to stabilize")
            chain.append(f(st) & f(U[0]))
            chain_e.append(TreeExpression.meet(e(chain_e[t]), e(E[0])))

        old = len(U[0] | U[1] | U[2])
        U[1], U[2] = chain[accept], chain[accept + 1]
        E[1], E[2] = chain_e[accept], chain_e[accept + 1]
        assert_strong()
        if len(U[0] | U[1] | U[2]) <= old:
            return hunt("chain acceptance did not grow the configuration")

    sc = StrongConfiguration(U[0], U[1], U[2], (E[0], E[1], E[2]))
    return sc, m, growth.anchor_expr


def _tree_net(f, e, anchor, adj, n, cap=2048):
    """Bounded sweep over tree-definable sets, looking for a proper
    non-bipartite one to recurse into.  Returns (set, expression) or None."""
    seen = {anchor: anchor_expr}
    queue = [(frozenset([u]), TreeExpression.singleton(u)) for u in sorted(anchor)]
    for s, ex in queue:
        seen.setdefault(s, ex)
    depth = 0
    while queue and depth <= 2 * len(anchor) and len(seen) < cap:
        depth += 1
        fresh = []
        for s, ex in queue:
            cands = [(f(s), e(ex))]
            for t, tex in sorted(seen.items(), key=lambda kv: (len(kv[0]), sorted(kv[0]))):
                cands.append((s & t, TreeExpression.meet(ex, tex)))
            for c, cex in cands:
                if c in seen or not c:
                    continue
                seen[c] = cex
                fresh.append((c, cex))
                if c != anchor:
                    bip, _ = bipartite_and_odd_girth(_induced(n, adj, c))
                    if not bip:
                        return c, cex
        queue = fresh
    return None


# ---------------------------------------------------------------------------
# lifting and validation


def _tree_step(trace, edge_name, expr, members, q, memo, budget=None):
    """Emit a formula step whose value is the vertex-level lift of ``expr``
    and return its name.  The step is checked against an independent set
    evaluation of the expression over the orbit graph."""
    key = id(expr)
    if key in memo:
        return memo[key]
    n = trace.world_size
    lift = _unary(
        sorted(v for u in expr.evaluate(q) for v in members[u]), n
    )
    if expr.kind == FULL:
        fla = make_formula(("x",), ("z",), [Atom.rel(edge_name, "x", "z")], {})
        name = trace.add_formula("tree_full", fla, expect=lift, budget=budget)
    elif expr.kind == SINGLETON:
        rep = min(members[expr.vertex])
        ys = tuple(f"y{i}" for i in range(n))
        fla = make_formula(("x",), ys, [Atom.orbit(*ys), Atom.eq("x", f"y{rep}")], {})
        name = trace.add_formula(
            "tree_orbit", fla, expect=lift, note=f"orbit of {rep}", budget=budget
        )
    elif expr.kind == NEIGHBORHOOD:
        child = _tree_step(trace, edge_name, expr.child, members, q, memo, budget)
        fla = make_formula(
            ("x",), ("z",), [Atom.rel(child, "z"), Atom.rel(edge_name, "z", "x")], {}
        )
        name = trace.add_formula("tree_forward", fla, expect=lift, budget=budget)
    elif expr.kind == INTERSECT:
        left = _tree_step(trace, edge_name, expr.left, members, q, memo, budget)
        right = _tree_step(trace, edge_name, expr.right, members, q, memo, budget)
        fla = make_formula(("x",), (), [Atom.rel(left, "x"), Atom.rel(right, "x")], {})
        name = trace.add_formula("tree_meet", fla, expect=lift, budget=budget)
    else:
        raise InternalCheckError(f"unknown tree expression kind {expr.kind!r}")
    memo[key] = name
    return name


def triangle_config_search(d: Digraph, G: PermGroup = None, budget=None) -> dict:
    """Grow a triangle configuration for ``d`` under the group ``G``.

    Returns a dict with the configuration, the strong configuration on the
    orbit graph, a trace whose steps reproduce every lifted block, the step
    names, and search statistics.  Raises PreconditionError unless ``d`` is
    smooth with a symmetric, loopless, non-bipartite quotient.
    """
    n = d.domain_size
    if n == 0 or d.edges.is_empty():
        raise PreconditionError("empty digraph has no triangle configuration")
    if not d.is_smooth():
        raise PreconditionError("digraph is not smooth")
    if G is None:
        G = PermGroup.trivial(n)
    _check_group(d, G)
    q, orbit_of = quotient(d, G)
    if not q.is_symmetric():
        raise PreconditionError("the quotient is not symmetric")
    if q.has_loop():
        raise PreconditionError("the quotient has a loop, use the loop drivers directly")
    bip, _ = bipartite_and_odd_girth(q)
    if bip:
        raise PreconditionError("the quotient is bipartite, no triple of blocks exists")

    members = {}
    for v in range(n):
        members.setdefault(orbit_of[v], set()).add(v)

    def base_step(bs):
        return frozenset(w for v in bs for w in q.successors(v))

    stats = {"rounds": 0, "recursions": 0, "max_depth": 0}
    growth = _Growth(
        q.domain_size,
        frozenset(range(q.domain_size)),
        TreeExpression.full(),
        base_step,
        TreeExpression.forward,
        stats,
        0,
    )
    sc, k, ground_expr = _search_level(growth)

    anchor = sc.u0 | sc.u1 | sc.u2
    if ground_expr.evaluate(q) != anchor:
        raise InternalCheckError("the ground expression drifted from the block union")
    for u_set, ex in zip(sc.blocks, sc.expressions):
        if ex.evaluate(q) != u_set:
            raise InternalCheckError("a block expression drifted from its block")

    blocks = []
    for u_set in sc.blocks:
        blocks.append(frozenset(v for u in u_set for v in members[u]))
    carrier = blocks[0] | blocks[1] | blocks[2]

    tc = TriangleConfiguration(
        _unary(sorted(carrier), n),
        _unary(sorted(blocks[0]), n),
        _unary(sorted(blocks[1]), n),
        _unary(sorted(blocks[2]), n),
        k,
    )
    bad = validate_triangle_config(d, G, tc)
    if bad:
        raise InternalCheckError("search produced a defective configuration: " + "; ".join(bad))

    trace = DerivationTrace(n, G)
    edge = trace.add_input("edge", d.edges, (0, 0))
    memo = {}
    steps = {"edge": edge}
    for i, ex in enumerate(sc.expressions):
        steps[f"P{i}"] = _tree_step(trace, edge, ex, members, q, memo, budget)
    steps["P"] = _tree_step(trace, edge, ground_expr, members, q, memo, budget)
    expressions = {
        "P": ground_expr,
        "P0": sc.expressions[0],
        "P1": sc.expressions[1],
        "P2": sc.expressions[2],
    }

    return {
        "config": tc,
        "strong": sc,
        "trace": trace,
        "steps": steps,
        "expressions": expressions,
        "orbit_graph": q,
        "orbit_of": orbit_of,
        "notes": {
            "power": k,
            "rounds": stats["rounds"],
            "recursions": stats["recursions"],
            "recursion_depth": stats["max_depth"],
            "recursion_reasons": tuple(stats.get("recursion_reasons", ())),
        },
    }


def validate_triangle_config(d: Digraph, G: PermGroup, tc: TriangleConfiguration) -> list:
    """Check the four conditions directly; returns a list of violation
    descriptions, empty when the configuration is sound."""
    n = d.domain_size
    if G is None:
        G = PermGroup.trivial(n)
    viol = []
    try:
        p = _unary_set(tc.p)
        blocks = [_unary_set(b) for b in tc.blocks]
    except PreconditionError as exc:
        return [str(exc)]
    if tc.k < 1:
        return ["the power must be at least 1"]

    union = blocks[0] | blocks[1] | blocks[2]
    overlap = (
        (blocks[0] & blocks[1]) | (blocks[0] & blocks[2]) | (blocks[1] & blocks[2])
    )
    if p != union or overlap or not p:
        viol.append("the blocks do not partition the carrier")

    ek = relation_power(d.edges, tc.k)
    succ = {}
    pred = {}
    for a, b in ek.tuples:
        succ.setdefault(a, set()).add(b)
        pred.setdefault(b, set()).add(a)
    for i in range(3):
        if any(succ.get(v, set()) & blocks[i] for v in blocks[i]):
            viol.append(f"block {i} is not independent")
    for i in range(3):
        plus = set().union(*(succ.get(v, set()) for v in blocks[i])) if blocks[i] else set()
        minus = set().union(*(pred.get(v, set()) for v in blocks[i])) if blocks[i] else set()
        for j in range(3):
            if j == i:
                continue
            if not (blocks[j] <= plus and blocks[j] <= minus):
                viol.append(f"block {j} is not two-sided adjacent to block {i}")

    if any(orbit & p and not (orbit <= p) for orbit in _orbits(G)):
        viol.append("the carrier is not invariant under the group")
    elif p:
        keep = sorted(p)
        inner = Digraph(n, [(a, b) for (a, b) in ek.tuples if a in p and b in p])
        sub, verts = inner.restrict(keep)
        qr, _ = quotient(sub, G.restrict(verts))
        if not qr.is_symmetric():
            viol.append("the restricted quotient is not symmetric")
        else:
            bip, _ = bipartite_and_odd_girth(qr)
            if bip:
                viol.append("the restricted quotient is bipartite")
    return viol


def _orbits(G: PermGroup):
    seen = set()
    out = []
    for v in range(G.domain_size):
        if v in seen:
            continue
        orb = {g[v] for g in G.elements}
        seen |= orb
        out.append(frozenset(orb))
    return out


# ---------------------------------------------------------------------------
# collapse and driver


def _leg_expected(ep, zbar1, zbar2, zbar3):
    succ = {}
    for a, b in ep:
        succ.setdefault(a, set()).add(b)
    out = set()
    for z1 in zbar1:
        s1 = succ.get(z1, set())
        for z2 in s1 & zbar2:
            for z3 in zbar3:
                if z2 not in succ.get(z3, set()):
                    continue
                for x in s1:
                    for y in succ.get(z3, set()):
                        out.add((x, y))
    return out


def one_b_driver(d: Digraph, G: PermGroup = None, budget=None) -> OneBOutcome:
    """Reduce a smooth digraph with symmetric non-bipartite quotient to the
    loop drivers.

    When the quotient already has a loop the pseudoloop driver answers
    directly.  Otherwise a triangle configuration is grown, the blocks are
    collapsed along a maximal within-block equivalence, and the pseudoloop
    driver runs on the collapsed digraph; its disjunction witness is pulled
    back along the collapse.
    """
    n = d.domain_size
    if n == 0 or d.edges.is_empty():
        raise PreconditionError("empty digraph")
    if not d.is_smooth():
        raise PreconditionError("digraph is not smooth")
    if G is None:
        G = PermGroup.trivial(n)
    _check_group(d, G)
    q, orbit_of = quotient(d, G)
    if not q.is_symmetric():
        raise PreconditionError("the quotient is not symmetric")
    if q.has_loop():
        out = pseudoloop_driver(d, G, budget=budget)
        if out.kind != "QUOTIENT_LOOP":
            raise InternalCheckError("loopy quotient did not yield a quotient loop")
        return OneBOutcome(
            kind="QUOTIENT_LOOP",
            outcome=out,
            config=None,
            trace=out.trace,
            sim=Relation(2, frozenset((v, v) for v in range(n))),
            class_reps=tuple(range(n)),
            class_of={v: v for v in range(n)},
            group_b=G,
            notes={"shortcut": "quotient loop", "quotient_size": q.domain_size},
        )
    bip, _ = bipartite_and_odd_girth(q)
    if bip:
        raise PreconditionError("the quotient is bipartite, the reduction does not apply")

    search = triangle_config_search(d, G, budget=budget)
    tc = search["config"]
    trace = search["trace"]
    steps = dict(search["steps"])
    edge = steps["edge"]
    k = tc.k
    p_set = _unary_set(tc.p)
    blocks = [_unary_set(b) for b in tc.blocks]
    p_sorted = sorted(p_set)

    # k-power edges with both ends on the carrier
    ek = relation_power(d.edges, k)
    ep = frozenset((a, b) for (a, b) in ek.tuples if a in p_set and b in p_set)
    mids = tuple(f"m{i}" for i in range(k - 1))
    names = ("x",) + mids + ("y",)
    atoms = [Atom.rel(edge, names[i], names[i + 1]) for i in range(k)]
    atoms += [Atom.rel(steps["P"], "x"), Atom.rel(steps["P"], "y")]
    ep_step = trace.add_formula(
        "edge_restrict",
        make_formula(("x", "y"), mids, atoms, {}),
        expect=Relation(2, ep),
        budget=budget,
    )
    steps["edge_on_carrier"] = ep_step

    # complements of the blocks inside the carrier, via two-sided adjacency
    pbar = []
    pbar_steps = []
    for j in range(3):
        comp = p_set - blocks[j]
        fla = make_formula(
            ("x",),
            ("z",),
            [Atom.rel(steps[f"P{j}"], "z"), Atom.rel(ep_step, "z", "x")],
            {},
        )
        name = trace.add_formula(
            "block_complement", fla, expect=_unary(sorted(comp), n), budget=budget
        )
        pbar.append(comp)
        pbar_steps.append(name)
    steps["complements"] = tuple(pbar_steps)

    # leg relations: x and y hang off a three-fence whose posts avoid the
    # indicated blocks
    leg_steps = []
    legs = []
    for j in range(3):
        fla = make_formula(
            ("x", "y"),
            ("z1", "z2", "z3"),
            [
                Atom.rel(ep_step, "z1", "x"),
                Atom.rel(ep_step, "z1", "z2"),
                Atom.rel(ep_step, "z3", "z2"),
                Atom.rel(ep_step, "z3", "y"),
                Atom.rel(pbar_steps[j], "z1"),
                Atom.rel(pbar_steps[j], "z2"),
                Atom.rel(pbar_steps[(j + 1) % 3], "z3"),
            ],
            {},
        )
        expected = _leg_expected(ep, pbar[j], pbar[j], pbar[(j + 1) % 3])
        name = trace.add_formula(
            "leg_relation", fla, expect=Relation(2, frozenset(expected)),
            note=f"legs avoid blocks {j},{j},{(j + 1) % 3}", budget=budget,
        )
        leg_steps.append(name)
        legs.append(frozenset(expected))
    steps["legs"] = tuple(leg_steps)

    meet = legs[0] & legs[1] & legs[2]
    meet &= frozenset((b, a) for (a, b) in meet)
    atoms = [Atom.rel(s, "x", "y") for s in leg_steps]
    atoms += [Atom.rel(s, "y", "x") for s in leg_steps]
    meet_step = trace.add_formula(
        "leg_meet",
        make_formula(("x", "y"), (), atoms, {}),
        expect=Relation(2, meet),
        budget=budget,
    )
    steps["meet"] = meet_step

    blocks2 = set()
    for b in blocks:
        blocks2 |= {(x, y) for x in b for y in b}
    if not all((v, v) in meet for v in p_set):
        raise InternalCheckError("the leg meet is not reflexive on the carrier")
    if not (meet <= blocks2):
        raise InternalCheckError("the leg meet left the blocks")

    # transitive closure by repeated squaring, each square a checked step
    cur = meet
    cur_step = meet_step
    while True:
        succ = {}
        for a, b in cur:
            succ.setdefault(a, set()).add(b)
        sq = frozenset((a, c) for a, bs in succ.items() for b in bs for c in succ.get(b, ()))
        if sq == cur:
            break
        cur_step = trace.add_formula(
            "kernel_square",
            make_formula(("x", "y"), ("w",), [Atom.rel(cur_step, "x", "w"), Atom.rel(cur_step, "w", "y")], {}),
            expect=Relation(2, sq),
            budget=budget,
        )
        cur = sq
    core = cur
    steps["kernel"] = cur_step
    if not (core <= blocks2):
        raise InternalCheckError("the kernel closure left the blocks")

    # maximal within-block equivalence: close the kernel under whole
    # pair orbits as long as the result stays an equivalence inside the
    # blocks; probing different first choices counts the alternatives
    cands = []
    seen_pairs = set()
    for a in p_sorted:
        for b in p_sorted:
            if a == b or (a, b) in seen_pairs:
                continue
            orb = frozenset((g[a], g[b]) for g in G.elements)
            seen_pairs |= orb
            if orb <= blocks2:
                cands.append(orb)

    def close_greedy(first=None):
        sim = set(core)
        order = cands if first is None else [first] + [o for o in cands if o is not first]
        changed = True
        while changed:
            changed = False
            for orb in order:
                if orb <= sim:
                    continue
                closed = set(_closure_relation(sim | orb, p_sorted).tuples)
                if closed <= blocks2:
                    sim = closed
                    changed = True
        return frozenset(sim)

    sim_pairs = close_greedy()
    variants = {sim_pairs}
    for orb in cands[:24]:
        variants.add(close_greedy(first=orb))
    added = sum(1 for orb in cands if orb <= sim_pairs and not (orb <= core))

    sim_rel = Relation(2, sim_pairs)
    if not is_equivalence_on(sim_rel, p_sorted):
        raise InternalCheckError("the block kernel is not an equivalence")

    classes = _equivalence_classes(sim_pairs, p_sorted)
    reps = tuple(min(c) for c in classes)
    cls_of = {v: i for i, c in enumerate(classes) for v in c}
    nc = len(classes)
    block_of_class = []
    for c in classes:
        owners = {i for i in range(3) if c <= blocks[i]}
        if len(owners) != 1:
            raise InternalCheckError("a collapse class straddles the blocks")
        block_of_class.append(owners.pop())

    bd = Digraph(nc, sorted({(cls_of[a], cls_of[b]) for (a, b) in ep}))
    gens = []
    for g in G.generators:
        img = []
        for c in classes:
            targets = {cls_of[g[v]] for v in c}
            if len(targets) != 1:
                raise InternalCheckError("the kernel is not invariant under the group")
            img.append(targets.pop())
        gens.append(tuple(img))
    H = PermGroup(gens, nc)

    if not bd.is_smooth():
        raise InternalCheckError("the collapsed digraph is not smooth")
    qb, _ = quotient(bd, H)
    if qb.has_loop():
        raise InternalCheckError("the collapsed quotient kept a loop")
    if not any(r.has_algebraic_length_1 for r in components_and_algebraic_length(qb)):
        raise InternalCheckError("the collapsed quotient lost algebraic length 1")
    for c1, c2 in itertools.combinations(range(nc), 2):
        if block_of_class[c1] != block_of_class[c2]:
            continue
        s1 = set(bd.successors(c1))
        s2 = set(bd.successors(c2))
        p1 = {a for a in range(nc) if c1 in bd.successors(a)}
        p2 = {a for a in range(nc) if c2 in bd.successors(a)}
        if (s1 & s2) or (p1 & p2):
            raise InternalCheckError("two collapse classes still share a neighbor")
    component_count = len(weak_components(bd))

    sub = pseudoloop_driver(bd, H, budget=budget)
    if sub.kind != "OR_WITNESS":
        raise InternalCheckError("the collapsed driver did not produce a disjunction witness")

    carrier_a = frozenset(v for ci in sub.carrier for v in classes[ci])
    alpha_a = Relation(
        2,
        frozenset(
            (x, y)
            for (ca, cb) in sub.alpha.tuples
            for x in classes[ca]
            for y in classes[cb]
        ),
    )
    rel_a = Relation(
        4,
        frozenset(
            t
            for quad in sub.relation.tuples
            for t in itertools.product(*(sorted(classes[c]) for c in quad))
        ),
    )
    if rel_a != or_relation(alpha_a, alpha_a, n, universe=carrier_a):
        raise InternalCheckError("the pulled-back witness is not the expected disjunction")

    return OneBOutcome(
        kind="OR_WITNESS",
        outcome=sub,
        config=tc,
        trace=trace,
        sim=sim_rel,
        class_reps=reps,
        class_of=cls_of,
        group_b=H,
        relation=rel_a,
        alpha=alpha_a,
        carrier=carrier_a,
        notes={
            "steps": steps,
            "collapsed_size": nc,
            "component_count": component_count,
            "kernel_added_orbits": added,
            "kernel_alternatives": len(variants),
            "search": search["notes"],
        },
    )
