"""Main derivation engine: from a linked smooth digraph to a loop, a smaller
invariant vertex set, or a definable disjunction-of-equalities relation.

Everything here runs on DerivationTrace objects: append-only logs of named
steps where every non-input step carries a formula over earlier step names
that re-evaluates to the recorded relation.  Traces are the ground truth for
certificates; the pipeline never claims a relation it cannot re-derive.

The top-level entry points are

    main_finite(d, H, k)    one pass over a k-linked smooth digraph
    loop_driver(d, G)       iterate main_finite until a loop or a witness
    pseudoloop_driver(d, G) quotient walk + restriction rounds, translated
                            back to the original world
    or_collapse(s)          turn a disjunction witness into a pp-interpretation
                            of the triangle
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from . import dianalysis
from .errors import (
    BudgetExceeded,
    FallbackFailed,
    InternalCheckError,
    PreconditionError,
)
from .pplogic import (
    DEFAULT_EVAL_BUDGET,
    EQ,
    ORBIT,
    PARAM,
    REL,
    Atom,
    EvalEnv,
    RPPFormula,
    evaluate,
    make_formula,
    make_link_formulas,
    rpp_to_pp,
    validate_ranking,
)
from .relcore import (
    Digraph,
    OrbitRelationO,
    PermGroup,
    RankedGroup,
    Relation,
    Structure,
    _hom_search,
    apply_perm,
    is_core,
    is_subdirect,
    or_relation,
    perm_power,
    quotient,
    relation_power,
    transport_relation,
    transport_relation_per_coord,
)

__all__ = [
    "Step",
    "DerivationTrace",
    "MainFiniteOutcome",
    "PPInterpretation",
    "uprel",
    "p_center",
    "central_equivalence",
    "is_p_central",
    "is_pq_central",
    "is_tsr",
    "refine_to_central_or_q",
    "or_from_q",
    "walking",
    "or_from_center",
    "or_upgrade",
    "main_finite",
    "loop_driver",
    "pseudoloop_driver",
    "or_collapse",
]


# ---------------------------------------------------------------------------
# derivation traces


@dataclass(frozen=True)
class Step:
    """One named step of a derivation.

    kind is one of:
      input                   relation given from outside (the edge relation,
                              a parameter singleton, ...)
      formula                 relation defined by a formula over earlier steps
      transport               image of an earlier step under one permutation
      edge_plus_automorphism  edge set composed with an automorphism on the
                              second coordinate
    """

    name: str
    rule: str
    kind: str
    relation: Relation
    ranking: tuple
    formula: RPPFormula = None
    data: dict = field(default_factory=dict)
    note: str = ""


class DerivationTrace:
    """Append-only log of steps over a fixed world and symmetry family."""

    def __init__(self, world_size: int, group: PermGroup = None):
        self.world_size = world_size
        self.group = group if group is not None else PermGroup.trivial(world_size)
        self.steps = []
        self._by_name = {}
        self._declared = {}

    def __getitem__(self, name: str) -> Step:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def env(self) -> EvalEnv:
        return EvalEnv(
            self.world_size,
            {s.name: s.relation for s in self.steps},
            self.group,
        )

    def _push(self, step: Step) -> str:
        self.steps.append(step)
        self._by_name[step.name] = step
        self._declared[step.name] = step.ranking
        return step.name

    def _next_name(self) -> str:
        return f"s{len(self.steps):02d}"

    def add_input(self, rule: str, relation: Relation, ranking, note: str = "") -> str:
        ranking = tuple(ranking)
        if len(ranking) != relation.arity:
            raise PreconditionError("ranking length must match the arity")
        return self._push(
            Step(self._next_name(), rule, "input", relation, ranking, note=note)
        )

    def add_formula(
        self,
        rule: str,
        formula: RPPFormula,
        expect: Relation = None,
        note: str = "",
        budget: int = None,
    ) -> str:
        validate_ranking(formula, self._declared, self.world_size)
        rel = evaluate(formula, self.env(), budget or DEFAULT_EVAL_BUDGET)
        if expect is not None and rel != expect:
            raise InternalCheckError(
                f"step '{rule}' evaluated to a relation different from the "
                f"expected one ({len(rel)} vs {len(expect)} tuples)"
            )
        ranking = tuple(formula.rank(v) for v in formula.free_vars)
        return self._push(
            Step(self._next_name(), rule, "formula", rel, ranking, formula, note=note)
        )

    def add_transport(self, rule: str, source: str, perm, note: str = "") -> str:
        perm = tuple(perm)
        src = self[source]
        rel = transport_relation(src.relation, perm)
        return self._push(
            Step(
                self._next_name(),
                rule,
                "transport",
                rel,
                (0,) * rel.arity,
                data={"source": source, "perm": list(perm)},
                note=note,
            )
        )

    def add_edge_plus_automorphism(
        self, rule: str, source: str, g, note: str = ""
    ) -> str:
        g = tuple(g)
        src = self[source].relation
        if src.arity != 2:
            raise PreconditionError("edge composition needs a binary relation")
        rel = Relation(2, frozenset((x, g[y]) for x, y in src.tuples))
        return self._push(
            Step(
                self._next_name(),
                rule,
                "edge_plus_automorphism",
                rel,
                (0, 1),
                data={"source": source, "g": list(g)},
                note=note,
            )
        )

    def replay(self, inputs=None, budget: int = None) -> None:
        """Recompute every step from scratch; raise if anything drifts.

        inputs may supply fresh relations for input steps by name.
        """
        rels = {}
        declared = {}
        for st in self.steps:
            if st.kind == "input":
                rel = (inputs or {}).get(st.name, st.relation)
            elif st.kind == "transport":
                rel = transport_relation(
                    Relation(
                        self._by_name[st.data["source"]].relation.arity,
                        frozenset(rels[st.data["source"]].tuples),
                    ),
                    st.data["perm"],
                )
            elif st.kind == "edge_plus_automorphism":
                g = st.data["g"]
                rel = Relation(
                    2,
                    frozenset((x, g[y]) for x, y in rels[st.data["source"]].tuples),
                )
            elif st.kind == "formula":
                validate_ranking(st.formula, declared, self.world_size)
                rel = evaluate(
                    st.formula,
                    EvalEnv(self.world_size, dict(rels), self.group),
                    budget or DEFAULT_EVAL_BUDGET,
                )
            else:
                raise InternalCheckError(f"unknown step kind {st.kind!r}")
            if rel != st.relation:
                raise InternalCheckError(f"step {st.name} does not replay")
            rels[st.name] = rel
            declared[st.name] = st.ranking


# ---------------------------------------------------------------------------
# brute-force validators for the relation classes the engine manipulates


def p_center(R: Relation, n: int) -> frozenset:
    """Elements whose section is everything: {a : (a, x2..xm) in R for all x}."""
    if R.arity < 1:
        raise PreconditionError("need arity >= 1")
    want = n ** (R.arity - 1)
    counts = {}
    for t in R.tuples:
        counts[t[0]] = counts.get(t[0], 0) + 1
    return frozenset(a for a in range(n) if counts.get(a, 0) == want)


def central_equivalence(R: Relation, n: int) -> Relation:
    """Pairs whose joint section is everything, as a binary relation."""
    if R.arity < 2:
        raise PreconditionError("need arity >= 2")
    want = n ** (R.arity - 2)
    counts = {}
    for t in R.tuples:
        key = (t[0], t[1])
        counts[key] = counts.get(key, 0) + 1
    return Relation(
        2, frozenset(k for k, c in counts.items() if c == want)
    )


def is_equivalence_on(rel: Relation, universe) -> bool:
    universe = set(universe)
    pairs = rel.tuples
    if any(x not in universe or y not in universe for x, y in pairs):
        return False
    if any((v, v) not in pairs for v in universe):
        return False
    if any((y, x) not in pairs for x, y in pairs):
        return False
    by_first = {}
    for x, y in pairs:
        by_first.setdefault(x, set()).add(y)
    for x, y in pairs:
        if not by_first.get(y, set()) <= by_first[x]:
            return False
    return True


def is_p_central(R: Relation, n: int) -> bool:
    """Subdirect with a nonempty center.  For binary R this is centrality."""
    return is_subdirect(R, n) and bool(p_center(R, n))


def is_pq_central(R: Relation, n: int) -> bool:
    """All two-coordinate projections full and the pair center an equivalence."""
    if R.arity < 3:
        return False
    full = Relation.full(2, n)
    for i, j in itertools.permutations(range(R.arity), 2):
        if R.project((i, j)) != full:
            return False
    alpha = central_equivalence(R, n)
    return is_equivalence_on(alpha, range(n))


def is_tsr(R: Relation, n: int) -> bool:
    """Totally symmetric and closed under collapsing repeats."""
    return R.is_totally_symmetric() and R.contains_all_repeats(n)


def _equivalence_classes(pairs, universe):
    """Classes of the reflexive-symmetric-transitive closure, by least member."""
    parent = {v: v for v in universe}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for x, y in pairs:
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)
    classes = {}
    for v in universe:
        classes.setdefault(find(v), set()).add(v)
    return [frozenset(classes[r]) for r in sorted(classes)]


def _closure_relation(pairs, universe) -> Relation:
    out = set()
    for cls in _equivalence_classes(pairs, universe):
        for x in cls:
            for y in cls:
                out.add((x, y))
    return Relation(2, frozenset(out))


# ---------------------------------------------------------------------------
# the cover operator: common-neighbour power of a relation
#
# uprel(R, j) has arity j and holds x1..xj whenever some y is R-related to
# every (m-1)-subtuple of the x's (m = arity of R).  The result is always
# totally symmetric, and for the relations this engine feeds it, also closed
# under repeats.


def _rows(R: Relation) -> dict:
    """Map y -> set of tail tuples with (y, tail) in R."""
    rows = {}
    for t in R.tuples:
        rows.setdefault(t[0], set()).add(t[1:])
    return rows


def uprel(R: Relation, j: int, n: int, budget: int = 5_000_000) -> Relation:
    m = R.arity
    if m < 2:
        raise PreconditionError("cover power needs arity >= 2")
    if j < m - 1:
        raise PreconditionError("cover power needs j >= arity - 1")
    rows = _rows(R)
    out = set()
    ticks = 0
    for y, tails in rows.items():
        if m == 2:
            vals = sorted(x for (x,) in tails)
            ticks += len(vals) ** j
            if ticks > budget:
                raise BudgetExceeded("cover power is too large to enumerate")
            out.update(itertools.product(vals, repeat=j))
            continue

        # arity >= 3: depth-first over positions, pruning by subtuple checks
        def rec(prefix):
            nonlocal ticks
            ticks += 1
            if ticks > budget:
                raise BudgetExceeded("cover power is too large to enumerate")
            if len(prefix) == j:
                out.add(tuple(prefix))
                return
            for v in range(n):
                prefix.append(v)
                if len(prefix) >= m - 1:
                    ok = all(
                        sub + (v,) in tails
                        for sub in itertools.combinations(prefix[:-1], m - 2)
                    )
                else:
                    ok = True
                if ok:
                    rec(prefix)
                prefix.pop()

        rec([])
    return Relation(j, frozenset(out))


def _uprel_is_full(R: Relation, j: int, n: int) -> bool:
    """Cheap fullness test for uprel(R, j) using its total symmetry."""
    m = R.arity
    rows = _rows(R)
    for combo in itertools.combinations_with_replacement(range(n), j):
        ok = any(
            all(sub in tails for sub in itertools.combinations(combo, m - 1))
            for tails in rows.values()
        )
        if not ok:
            return False
    return True


def _uprel_formula(step: str, base_ranking, j: int) -> RPPFormula:
    """Formula for the cover power of an earlier step.

    The step's ranking must have equal ranks on its tail coordinates; the
    bound witness sits at rank r1 - rtail so every atom is a uniform shift.
    """
    base = tuple(base_ranking)
    m = len(base)
    tail = set(base[1:])
    if len(tail) != 1:
        raise PreconditionError("cover power needs equal tail ranks")
    rt = tail.pop()
    xs = [f"x{i}" for i in range(1, j + 1)]
    atoms = []
    for combo in itertools.combinations(range(j), m - 1):
        atoms.append(Atom.rel(step, "yw", *[xs[i] for i in combo]))
    ranks = {"yw": base[0] - rt}
    return make_formula(xs, ["yw"], atoms, ranks)


# ---------------------------------------------------------------------------
# the iterated-cover schedule: given a totally symmetric starting relation,
# repeatedly take the smallest proper cover power until the relation is a
# fixed point of its own-arity cover (pair-center track) or every cover up
# to the world size is full (center track)


def _rosenberg_schedule(T: Relation, n: int):
    """Simulate the cover iteration from T.

    Returns (tag, steps) with tag "P" or "PQ" and steps a list of
    (j, resulting relation) in order.
    """
    steps = []
    cur = T
    for _ in range(n * n + n + 2):
        m = cur.arity
        nab_m = uprel(cur, m, n)
        if nab_m == cur:
            if m <= 2:
                raise InternalCheckError(
                    "a binary cover fixed point would have been caught earlier"
                )
            return "PQ", steps
        found = None
        for j in range(m, n + 1):
            if j == m:
                cand = nab_m
            else:
                if _uprel_is_full(cur, j, n):
                    continue
                cand = uprel(cur, j, n)
            if not cand.is_full(n):
                found = (j, cand)
                break
        if found is None:
            return "P", steps
        steps.append(found)
        cur = found[1]
    raise InternalCheckError("cover iteration failed to settle")


@dataclass(frozen=True)
class RefineResult:
    kind: str  # "CENTRAL" or "QCENTRAL"
    rel_step: str
    alpha_step: str = None


def _strip_formula(step: str, arity_out: int, n: int, witness_prefix: str) -> RPPFormula:
    """One arity-lowering step: x-block plus an orbit-constrained block of
    witnesses hitting every element."""
    xs = [f"x{i}" for i in range(1, arity_out + 1)]
    ys = [f"{witness_prefix}{i}" for i in range(n)]
    atoms = [Atom.orbit(*ys)]
    for y in ys:
        atoms.append(Atom.rel(step, *xs, y))
    return make_formula(xs, ys, atoms, {})


def _strip_expected(R: Relation, n: int) -> Relation:
    """Tuples whose every one-point extension lies in R."""
    m = R.arity
    counts = {}
    for t in R.tuples:
        counts[t[:-1]] = counts.get(t[:-1], 0) + 1
    return Relation(m - 1, frozenset(k for k, c in counts.items() if c == n))


def refine_to_central_or_q(
    trace: DerivationTrace, d: Digraph, H: RankedGroup, k: int, edge_step: str
) -> RefineResult:
    """Drive the k-th power of the edge relation to a binary central relation
    or a ternary relation with an equivalence pair-center, recording every
    move on the trace."""
    n = d.domain_size
    if k == 1:
        rk_step = edge_step
        rk = trace[edge_step].relation
    else:
        mids = [f"w{i}" for i in range(1, k)]
        chain = ["x"] + mids + ["y"]
        atoms = [
            Atom.rel(edge_step, chain[i], chain[i + 1]) for i in range(k)
        ]
        ranks = {v: i for i, v in enumerate(chain)}
        f = make_formula(["x", "y"], mids, atoms, ranks)
        rk_step = trace.add_formula(
            "edge_power", f, expect=relation_power(d.edges, k),
            note=f"length-{k} walks",
        )
        rk = trace[rk_step].relation

    if p_center(rk, n):
        return RefineResult("CENTRAL", rk_step)

    # no center: take the first proper cover power of the walk relation
    jstar = None
    for j in range(2, n + 1):
        if not _uprel_is_full(rk, j, n):
            jstar = j
            break
    if jstar is None:
        raise InternalCheckError(
            "every cover power of a non-central linked relation was full"
        )
    t0 = uprel(rk, jstar, n)
    base = trace[rk_step].ranking
    t_step = trace.add_formula(
        "cover_power", _uprel_formula(rk_step, base, jstar), expect=t0
    )
    if not is_tsr(t0, n):
        raise InternalCheckError("cover power is not totally symmetric reflexive")
    if jstar == 2:
        comp = dianalysis.weak_components(Digraph.from_relation(n, t0))
        if len(comp) != 1:
            raise InternalCheckError(
                "binary cover of a linked relation must be weakly connected"
            )

    tag, schedule = _rosenberg_schedule(t0, n)
    cur, cur_step = t0, t_step
    for j, nxt in schedule:
        cur_step = trace.add_formula(
            "cover_step",
            _uprel_formula(cur_step, (0,) * cur.arity, j),
            expect=nxt,
        )
        cur = nxt
        if not is_tsr(cur, n):
            raise InternalCheckError("cover step lost total symmetry")

    if tag == "P":
        if not is_p_central(cur, n):
            raise InternalCheckError("center track ended on a non-central relation")
        center = p_center(cur, n)
        while cur.arity > 2:
            expected = _strip_expected(cur, n)
            cur_step = trace.add_formula(
                "arity_strip",
                _strip_formula(cur_step, cur.arity - 1, n, "y"),
                expect=expected,
            )
            cur = expected
            if cur.is_full(n) or cur.is_empty():
                raise InternalCheckError("arity strip left the proper range")
            if p_center(cur, n) != center:
                raise InternalCheckError("arity strip moved the center")
        return RefineResult("CENTRAL", cur_step)

    # pair-center track
    if not is_pq_central(cur, n):
        raise InternalCheckError("pair-center track ended on a bad relation")
    alpha = central_equivalence(cur, n)
    if alpha.is_full(n):
        raise InternalCheckError("pair center of a proper fixed point is full")
    while cur.arity > 3:
        expected = _strip_expected(cur, n)
        cur_step = trace.add_formula(
            "arity_strip",
            _strip_formula(cur_step, cur.arity - 1, n, "y"),
            expect=expected,
        )
        cur = expected
        if cur.is_full(n) or cur.is_empty():
            raise InternalCheckError("arity strip left the proper range")
        if central_equivalence(cur, n) != alpha:
            raise InternalCheckError("arity strip moved the pair center")
    alpha_step = trace.add_formula(
        "pair_center", _strip_formula(cur_step, 2, n, "y"), expect=alpha
    )
    return RefineResult("QCENTRAL", cur_step, alpha_step)


# ---------------------------------------------------------------------------
# disjunction extraction from a ternary relation with equivalence pair-center


def _cover_select(I: frozenset, G: PermGroup, n: int):
    """Pick the block arity and the covered-tuple relation from one section.

    Returns (k2, T) where k2-1 is the largest j such that every j-subset of
    the world lies in some group image of I.
    """
    imgs = {frozenset(g[i] for i in I) for g in G.elements}

    def covered(vals):
        s = frozenset(vals)
        return any(s <= img for img in imgs)

    j = 1
    while j <= n and all(
        covered(c) for c in itertools.combinations(range(n), j)
    ):
        j += 1
    k2 = j  # = jstar + 1
    if k2 > len(I) + 1:
        raise InternalCheckError("cover arity exceeded the section size")
    tuples = frozenset(
        t for t in itertools.product(range(n), repeat=k2) if covered(t)
    )
    T = Relation(k2, tuples)
    if T.is_full(n) or T.is_empty():
        raise InternalCheckError("covered-tuple relation left the proper range")
    if not is_tsr(T, n):
        raise InternalCheckError("covered-tuple relation is not symmetric")
    return k2, T


def or_from_q(
    trace: DerivationTrace, rel_step: str, alpha_step: str, G: PermGroup
) -> dict:
    """From a ternary relation whose pair center is a proper equivalence,
    define a disjunction relation OR(T, T) on the trace."""
    n = trace.world_size
    R = trace[rel_step].relation
    alpha = trace[alpha_step].relation
    if R.arity != 3:
        raise PreconditionError("need a ternary relation")
    if not is_pq_central(R, n):
        raise PreconditionError("relation is not q-central")
    if central_equivalence(R, n) != alpha:
        raise PreconditionError("pair-center step does not match the relation")
    if alpha.is_full(n):
        raise PreconditionError("pair center must be proper")
    for g in G.generators:
        if transport_relation(R, g) != R:
            raise PreconditionError("the group must preserve the relation")

    sections = {}
    for a, b in sorted(set(itertools.product(range(n), repeat=2)) - set(alpha.tuples)):
        sections[(a, b)] = frozenset(c for c in range(n) if (a, b, c) in R)
    maximal = [
        p
        for p, I in sections.items()
        if not any(I < J for J in sections.values())
    ]
    a, b = min(maximal)
    I = sections[(a, b)]
    if not I or len(I) == n:
        raise InternalCheckError("chosen section is not proper")

    k2, T = _cover_select(I, G, n)

    xs1 = [f"x{i}_1" for i in range(1, k2 + 1)]
    xs2 = [f"x{i}_2" for i in range(1, k2 + 1)]
    zs = [f"z{i}" for i in range(n)]
    atoms = [
        Atom.eq("y0", f"z{a}"),
        Atom.eq("y2", f"z{b}"),
        Atom.orbit(*zs),
    ]
    for jblk, xs in ((1, xs1), (2, xs2)):
        lo, hi = f"y{jblk - 1}", f"y{jblk}"
        for x in xs:
            atoms.append(Atom.rel(rel_step, lo, hi, x))
        for i in sorted(I):
            atoms.append(Atom.rel(rel_step, lo, hi, f"z{i}"))
    f = make_formula(xs1 + xs2, ["y0", "y1", "y2"] + zs, atoms, {})
    or_step = trace.add_formula(
        "or_join", f, expect=or_relation(T, T, n),
        note=f"section at pair ({a},{b})",
    )
    return {"or_step": or_step, "T": T, "pair": (a, b), "section": I, "k": k2}


# ---------------------------------------------------------------------------
# walking: shrink a central seed set along the link chain of the digraph


def _chain_spec(k: int, n_links: int, edge_step: str):
    """Single-edge expansion of the k-link closure chain, in walk order.

    Returns (names, ranks, atoms, dirs); dirs[i] is +1 when position i holds
    a forward edge and -1 for a backward edge.
    """
    N = 2 * k * n_links
    names = [f"c{i}" for i in range(N + 1)]
    ranks = {names[0]: 0}
    atoms = []
    dirs = []
    r = 0
    i = 0
    for _ in range(n_links):
        for _ in range(k):
            atoms.append(Atom.rel(edge_step, names[i], names[i + 1]))
            dirs.append(+1)
            r += 1
            ranks[names[i + 1]] = r
            i += 1
        for _ in range(k):
            atoms.append(Atom.rel(edge_step, names[i + 1], names[i]))
            dirs.append(-1)
            r -= 1
            ranks[names[i + 1]] = r
            i += 1
    return names, ranks, atoms, dirs


def _spread_sets(d: Digraph, start, dirs):
    """Vertex sets reachable at each chain position from the start set."""
    sets = [frozenset(start)]
    cur = set(start)
    for s in dirs:
        nxt = set()
        for v in cur:
            nxt.update(d.successors(v) if s > 0 else d.predecessors(v))
        cur = nxt
        sets.append(frozenset(cur))
    return sets


def _ren_atom(a: Atom, ren: dict) -> Atom:
    vs = [ren.get(v, v) for v in a.vars]
    if a.kind == REL:
        return Atom.rel(a.name, *vs)
    if a.kind == EQ:
        return Atom.eq(*vs)
    if a.kind == PARAM:
        return Atom.param(a.value, vs[0])
    if a.kind == ORBIT:
        return Atom.orbit(*vs)
    raise InternalCheckError(f"unknown atom kind {a.kind!r}")


def _inline_unary(defn: RPPFormula, target: str, target_rank: int, prefix: str):
    """Copy a single-free-variable formula onto the variable `target`,
    prefixing its bound variables and shifting every rank so the free
    variable lands on target_rank.

    Returns (atoms, bound_names, ranks).
    """
    fv = defn.free_vars[0]
    shift = target_rank - defn.rank(fv)
    ren = {fv: target}
    for v in defn.bound_vars:
        ren[v] = prefix + v
    atoms = [_ren_atom(a, ren) for a in defn.atoms]
    ranks = {prefix + v: defn.rank(v) + shift for v in defn.bound_vars}
    return atoms, [prefix + v for v in defn.bound_vars], ranks


def walking(trace: DerivationTrace, d: Digraph, k: int, c_step: str) -> dict:
    """Walk a proper seed set along the link chain until just before it
    explodes to everything; keep the smooth part of that last proper stop.

    Returns a dict with the restriction step, the set itself, and a fully
    inlined single-variable formula for it (used by the release engine),
    together with the positions of its seed atoms.
    """
    n = d.domain_size
    edge_step = _edge_of(trace)
    C = frozenset(trace[c_step].relation.column(0))
    if not C or len(C) == n:
        raise PreconditionError("seed set must be proper and nonempty")

    names, ranks, chain_atoms, dirs = _chain_spec(k, n, edge_step)
    sets = _spread_sets(d, C, dirs)
    if len(sets[-1]) != n:
        raise InternalCheckError("the chain of a linked digraph must spread everywhere")
    istar = None
    for i in range(len(sets) - 1):
        if len(sets[i]) < n and len(sets[i + 1]) == n:
            istar = i
            break
    if istar is None:
        raise InternalCheckError("no blow-up position found on the chain")
    bprime = sets[istar]

    if istar == 0:
        bprime_step = c_step
        bprime_defn = make_formula(
            ["bv"], [], [Atom.rel(c_step, "bv")], {}
        )
        seed_positions = [0]
    else:
        pvars = [f"p{i}" for i in range(istar + 1)]
        shift = -ranks[names[istar]]
        pranks = {pvars[i]: ranks[names[i]] + shift for i in range(istar + 1)}
        patoms = [Atom.rel(c_step, pvars[0])]
        for i in range(istar):
            a = chain_atoms[i]
            ren = {names[j]: pvars[j] for j in range(istar + 1)}
            patoms.append(_ren_atom(a, ren))
        f_prefix = make_formula(
            [pvars[istar]], pvars[:istar], patoms, pranks
        )
        bprime_step = trace.add_formula(
            "walk_prefix", f_prefix,
            expect=Relation(1, frozenset((v,) for v in bprime)),
        )
        bprime_defn = make_formula(
            ["bv"],
            pvars[:istar],
            [_ren_atom(a, {pvars[istar]: "bv"}) for a in patoms],
            {("bv" if v == pvars[istar] else v): r for v, r in pranks.items()},
        )
        seed_positions = [0]

    B = dianalysis.smooth_part(d, bprime)
    if not B:
        raise InternalCheckError("walk stop has an empty smooth part")

    # pump: vertices with long enough in- and out-walks inside the stop set
    m = len(bprime)
    ins = [f"wi{j}" for j in range(1, m + 1)]
    outs = [f"wo{j}" for j in range(1, m + 1)]
    pump_ranks = {"wb": 0}
    for j, v in enumerate(ins, start=1):
        pump_ranks[v] = j - m - 1
    for j, v in enumerate(outs, start=1):
        pump_ranks[v] = j
    pump_atoms = []
    walk = ins + ["wb"] + outs
    for i in range(len(walk) - 1):
        pump_atoms.append(Atom.rel(edge_step, walk[i], walk[i + 1]))
    for v in walk:
        pump_atoms.append(Atom.rel(bprime_step, v))
    f_pump = make_formula(["wb"], ins + outs, pump_atoms, pump_ranks)
    b_step = trace.add_formula(
        "walk_pump", f_pump,
        expect=Relation(1, frozenset((v,) for v in B)),
    )

    # the same definition with every stop-set atom inlined down to seed atoms
    full_atoms = list(pump_atoms[: len(walk) - 1])
    full_bound = ins + outs
    full_ranks = dict(pump_ranks)
    stations = []
    for v in walk:
        at, bnd, rk = _inline_unary(bprime_defn, v, pump_ranks[v], f"{v}_")
        base = len(full_atoms)
        stations.append(base + seed_positions[0])
        full_atoms.extend(at)
        full_bound.extend(bnd)
        full_ranks.update(rk)
    psi_full = make_formula(["wb"], full_bound, full_atoms, full_ranks)
    got = evaluate(psi_full, trace.env())
    if got != trace[b_step].relation:
        raise InternalCheckError("inlined walk formula disagrees with the pump")

    return {
        "b_step": b_step,
        "B": B,
        "bprime_step": bprime_step,
        "Bprime": bprime,
        "istar": istar,
        "psi_full": psi_full,
        "stations": stations,
        "seed": C,
        "c_step": c_step,
    }


def _edge_of(trace: DerivationTrace) -> str:
    name = getattr(trace, "edge_step", None)
    if name is None:
        raise InternalCheckError("trace has no registered edge step")
    return name


# ---------------------------------------------------------------------------
# the release engine: drop seed anchors from the closure chain one at a time
# until the derived pair relation first crosses a caller-chosen threshold,
# then free the crossing anchor's variable as a third coordinate


def _release_links(
    trace: DerivationTrace,
    d: Digraph,
    k: int,
    walkinfo: dict,
    crossing,
    rule: str,
    budget: int = None,
) -> dict:
    """Inline the stop-set definition on every inner chain variable, then
    drop its seed anchors one at a time.  crossing(rel, alpha0) decides when
    the pair relation between the chain ends has gone far enough; at that
    point the dropped anchor's variable is freed as a third coordinate.
    """
    n = d.domain_size
    edge_step = _edge_of(trace)
    b_step = walkinfo["b_step"]
    B = walkinfo["B"]
    psi = walkinfo["psi_full"]
    names, ranks, chain_atoms, _dirs = _chain_spec(k, n, edge_step)
    N = len(names) - 1

    atoms = list(chain_atoms)
    allranks = dict(ranks)
    bound = list(names[1:N])
    atoms.append(Atom.rel(b_step, names[0]))
    atoms.append(Atom.rel(b_step, names[N]))
    stations = []
    for h in range(1, N):
        host = names[h]
        at, bnd, rk = _inline_unary(psi, host, ranks[host], f"{host}_")
        base = len(atoms)
        for s in walkinfo["stations"]:
            stations.append(base + s)
        atoms.extend(at)
        bound.extend(bnd)
        allranks.update(rk)

    env = trace.env()
    keep = [True] * len(atoms)

    def state_formula(free_extra=None):
        fv = [names[0], names[N]]
        bnd = list(bound)
        if free_extra is not None:
            fv.append(free_extra)
            bnd.remove(free_extra)
        return make_formula(
            fv, bnd, [a for i, a in enumerate(atoms) if keep[i]], allranks
        )

    alpha0 = evaluate(state_formula(), env, budget or DEFAULT_EVAL_BUDGET)
    sub, embed = d.restrict(B)
    classes, _ = dianalysis.link_equivalence_bfs(sub, k)
    oracle = frozenset(
        (embed[x], embed[y])
        for x in range(sub.domain_size)
        for y in range(sub.domain_size)
        if classes[x] == classes[y]
    )
    if alpha0 != Relation(2, oracle):
        raise InternalCheckError("closed chain disagrees with the link classes")

    seed = frozenset(trace[walkinfo["c_step"]].relation.column(0))
    prev = alpha0
    for ai in stations:
        keep[ai] = False
        rel = evaluate(state_formula(), env, budget or DEFAULT_EVAL_BUDGET)
        if not prev.tuples <= rel.tuples:
            raise InternalCheckError("releasing an anchor shrank the pair relation")
        if crossing(rel, alpha0):
            xvar = atoms[ai].vars[0]
            f_s = state_formula(free_extra=xvar)
            s_step = trace.add_formula(rule, f_s, budget=budget)
            S = trace[s_step].relation
            if S.project((0, 1)) != rel:
                raise InternalCheckError("opened state does not project to its pairs")
            filtered = frozenset((p, q) for (p, q, c) in S.tuples if c in seed)
            if Relation(2, filtered) != prev:
                raise InternalCheckError("seed-pinned slice of the opened state drifted")
            return {
                "s_step": s_step,
                "S": S,
                "l": allranks.get(xvar, 0),
                "alpha0": alpha0,
                "pre": prev,
                "post": rel,
            }
        prev = rel
    raise InternalCheckError("released every anchor without crossing the threshold")


# ---------------------------------------------------------------------------
# disjunction extraction from a binary central relation


def or_from_center(
    trace: DerivationTrace,
    d: Digraph,
    H: RankedGroup,
    k: int,
    rel_step: str,
    budget: int = None,
) -> dict:
    """From a binary central relation, either find a proper invariant smooth
    subset or define a disjunction relation OR(T, T) on the trace."""
    n = d.domain_size
    st = trace[rel_step]
    R = st.relation
    if R.arity != 2:
        raise PreconditionError("need a binary relation")
    ranking = st.ranking
    if not H.leaves_invariant(R, ranking):
        raise PreconditionError("the family must preserve the ranked relation")
    center = p_center(R, n)
    if not center:
        raise PreconditionError("relation has an empty center")
    if len(center) == n:
        raise PreconditionError("center must be a proper subset")
    G = H.projection_group()
    s_rank = ranking[1] - ranking[0]

    ys = [f"y{i}" for i in range(n)]
    atoms = [Atom.orbit(*ys)] + [Atom.rel(rel_step, "x", y) for y in ys]
    ranks = {y: s_rank for y in ys}
    f_center = make_formula(["x"], ys, atoms, ranks)
    c_step = trace.add_formula(
        "center", f_center,
        expect=Relation(1, frozenset((v,) for v in sorted(center))),
    )

    walkinfo = walking(trace, d, k, c_step)
    B = walkinfo["B"]
    sub, embed = d.restrict(B)
    _, linked = dianalysis.link_equivalence_bfs(sub, k)
    if linked:
        return {"kind": "SUBSET", "subset": B, "subset_step": walkinfo["b_step"]}

    opened = _release_links(
        trace, d, k, walkinfo,
        crossing=lambda rel, a0: rel != a0,
        rule="link_chain_open",
        budget=budget,
    )
    S = opened["S"]
    l = opened["l"]
    if not H.leaves_invariant(S, (0, 0, l)):
        raise InternalCheckError("opened state is not preserved by the family")
    alpha0 = opened["alpha0"]
    if opened["pre"] != alpha0:
        raise InternalCheckError("pair relation moved before the crossing")

    # pick the section: a non-linked pair with a witness outside the center
    candidates = []
    for (a, b, dd) in sorted(S.tuples):
        if (a, b) not in alpha0:
            candidates.append((a, b, dd))
    if not candidates:
        raise InternalCheckError("opened state has no cross-class triple")
    rows = {}
    for v in range(n):
        rows[v] = frozenset(w for w in range(n) if (v, w) in R)
    maximal = [
        c for c in candidates
        if not any(rows[c[2]] < rows[o[2]] for o in candidates)
    ]
    a, b, dd = min(maximal)
    if dd in center:
        raise InternalCheckError("crossing witness landed inside the center")
    I = rows[dd]
    if not I or len(I) == n:
        raise InternalCheckError("witness section is not proper")

    k2, T = _cover_select(I, G, n)

    xs1 = [f"x{i}_1" for i in range(1, k2 + 1)]
    xs2 = [f"x{i}_2" for i in range(1, k2 + 1)]
    zs = [f"z{i}" for i in range(n)]
    zps = [f"zp{i}" for i in range(n)]
    atoms = [
        Atom.eq("y0", f"z{a}"),
        Atom.eq("y2", f"z{b}"),
        Atom.orbit(*zs),
        Atom.orbit(*zps),
    ]
    ranks = {}
    for x in xs1 + xs2:
        ranks[x] = l + s_rank
    for z in zps:
        ranks[z] = l + s_rank
    ranks["X1"] = l
    ranks["X2"] = l
    for jblk, xs in ((1, xs1), (2, xs2)):
        lo, hi = f"y{jblk - 1}", f"y{jblk}"
        Xj = f"X{jblk}"
        atoms.append(Atom.rel(opened["s_step"], lo, hi, Xj))
        for x in xs:
            atoms.append(Atom.rel(rel_step, Xj, x))
        for i in sorted(I):
            atoms.append(Atom.rel(rel_step, Xj, f"zp{i}"))
    f = make_formula(
        xs1 + xs2,
        ["y0", "y1", "y2", "X1", "X2"] + zs + zps,
        atoms,
        ranks,
    )
    or_step = trace.add_formula(
        "or_bridge", f, expect=or_relation(T, T, n), budget=budget,
        note=f"witness {dd} outside the center",
    )
    return {
        "kind": "OR",
        "or_step": or_step,
        "T": T,
        "k": k2,
        "section": I,
        "witness": (a, b, dd),
    }


# ---------------------------------------------------------------------------
# upgrading a disjunction over covered tuples to one over an equivalence


def _binary_connected(T: Relation, n: int) -> bool:
    return len(dianalysis.weak_components(Digraph.from_relation(n, T))) == 1


def _rewrite_uprel_through_or(
    trace: DerivationTrace,
    or_step: str,
    curT: Relation,
    nxt: Relation,
    j: int,
    n: int,
    budget: int = None,
):
    """Apply a cover-power move to the first block of a two-block disjunction,
    then refresh the second block to match.  Returns the new step name."""
    m = curT.arity
    xs = [f"x{i}" for i in range(1, j + 1)]
    ys = [f"y{i}" for i in range(1, m + 1)]
    atoms = []
    for combo in itertools.combinations(range(j), m - 1):
        atoms.append(Atom.rel(or_step, "w", *[xs[i] for i in combo], *ys))
    f1 = make_formula(xs + ys, ["w"], atoms, {})
    step1 = trace.add_formula(
        "or_rewrite_first", f1, expect=or_relation(nxt, curT, n), budget=budget
    )

    x2s = [f"u{i}" for i in range(1, j + 1)]
    atoms = []
    for combo in itertools.combinations(range(j), m - 1):
        atoms.append(Atom.rel(step1, *x2s, "w", *[xs[i] for i in combo]))
    f2 = make_formula(x2s + xs, ["w"], atoms, {})
    step2 = trace.add_formula(
        "or_rewrite_second", f2, expect=or_relation(nxt, nxt, n), budget=budget
    )
    return step2


def _or_factor_pass(
    trace: DerivationTrace,
    or_step: str,
    m: int,
    n: int,
    keep: int,
    left: Relation,
    new_left: Relation,
    budget: int = None,
) -> str:
    """Replace the second block of OR(left, S) by quantifying S's tail over
    every orbit assignment; keep = number of leading S coordinates kept.

    With keep = 1 the pass yields OR(left, center of S); with keep = 2 it
    yields OR(left, pair center of S).
    """
    la = left.arity
    if n ** (m - keep) > 4096:
        raise BudgetExceeded("factor pass has too many conjuncts")
    xs = [f"x{i}" for i in range(1, la + 1)]
    ws = [f"w{i}" for i in range(1, keep + 1)]
    zs = [f"z{i}" for i in range(n)]
    atoms = [Atom.orbit(*zs)]
    for fvals in itertools.product(range(n), repeat=m - keep):
        tail = [f"z{v}" for v in fvals]
        atoms.append(Atom.rel(or_step, *xs, *ws, *tail))
    f = make_formula(xs + ws, zs, atoms, {})
    return trace.add_formula(
        "or_factor", f, expect=or_relation(left, new_left, n), budget=budget
    )


def _swap_blocks(
    trace: DerivationTrace, or_step: str, A: Relation, B_rel: Relation, n: int,
    budget: int = None,
) -> str:
    """From OR(A, B) define OR(B, A) by permuting the free blocks."""
    la, lb = A.arity, B_rel.arity
    xs = [f"x{i}" for i in range(1, la + 1)]
    ws = [f"w{i}" for i in range(1, lb + 1)]
    f = make_formula(ws + xs, [], [Atom.rel(or_step, *xs, *ws)], {})
    return trace.add_formula(
        "or_swap", f, expect=or_relation(B_rel, A, n), budget=budget
    )


def _distance_within(pairs, universe):
    """BFS distances over an undirected pair set; dict (u,v) -> hops."""
    adj = {v: set() for v in universe}
    for x, y in pairs:
        if x in adj and y in adj:
            adj[x].add(y)
            adj[y].add(x)
    dist = {}
    for s in universe:
        seen = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if w not in seen:
                        seen[w] = seen[v] + 1
                        nxt.append(w)
            frontier = nxt
        for v, dd in seen.items():
            dist[(s, v)] = dd
    return dist


def _final_or_from_pair(
    trace: DerivationTrace,
    d: Digraph,
    H: RankedGroup,
    k: int,
    orcc_step: str,
    budget: int = None,
) -> dict:
    """From OR(C, C) with C a proper unary set, walk the digraph and either
    find an invariant subset or produce OR(alpha, alpha) for an equivalence
    alpha on the stop set."""
    n = d.domain_size
    ORCC = trace[orcc_step].relation
    f_diag = make_formula(
        ["x"], [], [Atom.rel(orcc_step, "x", "x")], {}
    )
    C = frozenset(x for x in range(n) if (x, x) in ORCC)
    c_step = trace.add_formula(
        "or_diag", f_diag,
        expect=Relation(1, frozenset((v,) for v in sorted(C))),
    )
    if not C or len(C) == n:
        raise InternalCheckError("diagonal of the pair disjunction is not proper")

    walkinfo = walking(trace, d, k, c_step)
    B = walkinfo["B"]
    sub, embed = d.restrict(B)
    _, linked = dianalysis.link_equivalence_bfs(sub, k)
    if linked:
        return {"kind": "SUBSET", "subset": B, "subset_step": walkinfo["b_step"]}

    full_B = Relation(2, frozenset(itertools.product(sorted(B), repeat=2)))

    opened = _release_links(
        trace, d, k, walkinfo,
        crossing=lambda rel, a0: _closure_relation(rel.tuples, B) == full_B,
        rule="link_chain_open",
        budget=budget,
    )
    S = opened["S"]
    l = opened["l"]
    alpha0 = opened["alpha0"]
    q_exists = opened["post"]
    q_pinned = frozenset((p, q) for (p, q, c) in S.tuples if c in C)
    if _closure_relation(q_exists.tuples, B) != full_B:
        raise InternalCheckError("crossing state closure is not everything")
    if not set(alpha0.tuples) <= q_pinned:
        raise InternalCheckError("pinned slice lost the closed-chain pairs")
    alpha_fin = _closure_relation(q_pinned, B)
    if alpha_fin == full_B:
        raise InternalCheckError("pinned slice closure is not proper")
    if not is_equivalence_on(alpha_fin, B):
        raise InternalCheckError("pinned closure is not an equivalence")

    # shared-target graphs for the two slices and the chain length they need
    def shared_target(pairs):
        rows = {}
        for p, q in pairs:
            rows.setdefault(p, set()).add(q)
        out = set()
        for x in B:
            for y in B:
                if rows.get(x, set()) & rows.get(y, set()):
                    out.add((x, y))
        return out

    d_exists = shared_target(set(q_exists.tuples))
    d_pinned = shared_target(set(q_pinned))
    dist_e = _distance_within(d_exists, B)
    dist_p = _distance_within(d_pinned, B)
    need = 1
    for x in B:
        for y in B:
            if (x, y) not in dist_e:
                raise InternalCheckError("shared-target graph is not connected")
            need = max(need, dist_e[(x, y)])
    for x, y in alpha_fin.tuples:
        if (x, y) not in dist_p:
            raise InternalCheckError("pinned shared-target graph misses a class pair")
        need = max(need, dist_p[(x, y)])
    p = need
    if p > max(1, len(B) - 1):
        raise InternalCheckError("chaining length exceeded the stop set size")

    def u_atoms(tagy, tagyp, mids, wvars, Xvars):
        chain = [tagy] + mids + [tagyp]
        out = []
        for i in range(1, p + 1):
            out.append(Atom.rel(opened["s_step"], chain[i - 1], wvars[i - 1], Xvars[2 * i - 2]))
            out.append(Atom.rel(opened["s_step"], chain[i], wvars[i - 1], Xvars[2 * i - 1]))
        return out

    Xs = [f"XA{i}" for i in range(1, 2 * p + 1)]
    Ys = [f"XB{i}" for i in range(1, 2 * p + 1)]
    us = [f"ua{i}" for i in range(1, p)]
    vs = [f"ub{i}" for i in range(1, p)]
    wl = [f"wa{i}" for i in range(1, p + 1)]
    wr = [f"wb{i}" for i in range(1, p + 1)]
    atoms = []
    atoms += u_atoms("fy", "fyp", us, wl, Xs)
    atoms += u_atoms("fz", "fzp", vs, wr, Ys)
    for xi in Xs:
        for yj in Ys:
            atoms.append(Atom.rel(orcc_step, xi, yj))
    ranks = {}
    for v in Xs + Ys:
        ranks[v] = l
    f = make_formula(
        ["fy", "fyp", "fz", "fzp"],
        us + vs + wl + wr + Xs + Ys,
        atoms,
        ranks,
    )
    or_step = trace.add_formula(
        "or_equiv", f,
        expect=or_relation(alpha_fin, alpha_fin, n, universe=B),
        budget=budget,
    )
    return {
        "kind": "OR",
        "or_step": or_step,
        "alpha": alpha_fin,
        "carrier": B,
        "chain_length": p,
    }


def or_upgrade(
    trace: DerivationTrace,
    d: Digraph,
    H: RankedGroup,
    k: int,
    or_step: str,
    T: Relation,
    budget: int = None,
) -> dict:
    """Upgrade OR(T, T) over a covered-tuple relation to OR(alpha, alpha)
    over a proper equivalence, or find an invariant subset along the way."""
    n = trace.world_size

    if T.arity == 1:
        return _final_or_from_pair(trace, d, H, k, or_step, budget=budget)

    if T.arity == 2 and not _binary_connected(T, n):
        m = max(1, n - 1)
        alpha = T
        for _ in range(m - 1):
            alpha = Relation(
                2,
                frozenset(
                    (x, z)
                    for (x, y1) in alpha.tuples
                    for (y2, z) in T.tuples
                    if y1 == y2
                ),
            )
        if not is_equivalence_on(alpha, range(n)):
            raise InternalCheckError("chained disconnected cover is not an equivalence")
        if alpha.is_full(n):
            raise InternalCheckError("chained cover closure is full")
        # same two-step rewrite as a cover move, with the chain as the formula
        xs = ["x", "y"]
        ys = ["ya", "yb"]
        mids = [f"t{i}" for i in range(1, m)]
        chain = ["x"] + mids + ["y"]
        atoms = [
            Atom.rel(or_step, chain[i], chain[i + 1], "ya", "yb")
            for i in range(m)
        ]
        f1 = make_formula(xs + ys, mids, atoms, {})
        step1 = trace.add_formula(
            "or_rewrite_first", f1, expect=or_relation(alpha, T, n), budget=budget
        )
        atoms = [
            Atom.rel(step1, "u", "v", chain[i], chain[i + 1])
            for i in range(m)
        ]
        f2 = make_formula(["u", "v"] + xs, mids, atoms, {})
        step2 = trace.add_formula(
            "or_rewrite_second", f2, expect=or_relation(alpha, alpha, n),
            budget=budget,
        )
        return {
            "kind": "OR",
            "or_step": step2,
            "alpha": alpha,
            "carrier": frozenset(range(n)),
        }

    tag, schedule = _rosenberg_schedule(T, n)
    cur = T
    cur_step = or_step
    for j, nxt in schedule:
        cur_step = _rewrite_uprel_through_or(
            trace, cur_step, cur, nxt, j, n, budget=budget
        )
        cur = nxt

    m = cur.arity
    if tag == "PQ":
        if m <= 2:
            raise InternalCheckError("pair-center track needs arity > 2")
        alpha = central_equivalence(cur, n)
        if not is_equivalence_on(alpha, range(n)) or alpha.is_full(n):
            raise InternalCheckError("pair center is not a proper equivalence")
        step1 = _or_factor_pass(
            trace, cur_step, m, n, keep=2, left=cur, new_left=alpha, budget=budget
        )
        swap1 = _swap_blocks(trace, step1, cur, alpha, n, budget=budget)
        step2 = _or_factor_pass(
            trace, swap1, m, n, keep=2, left=alpha, new_left=alpha, budget=budget
        )
        return {
            "kind": "OR",
            "or_step": step2,
            "alpha": alpha,
            "carrier": frozenset(range(n)),
        }

    # center track: reduce to OR(C, C) and walk the digraph
    if not is_p_central(cur, n):
        raise InternalCheckError("center track ended on a non-central relation")
    Cset = p_center(cur, n)
    Crel = Relation(1, frozenset((v,) for v in sorted(Cset)))
    if len(Cset) == n:
        raise InternalCheckError("center of a proper fixed point is full")
    step1 = _or_factor_pass(
        trace, cur_step, m, n, keep=1, left=cur, new_left=Crel, budget=budget
    )
    swap1 = _swap_blocks(trace, step1, cur, Crel, n, budget=budget)
    step2 = _or_factor_pass(
        trace, swap1, m, n, keep=1, left=Crel, new_left=Crel, budget=budget
    )
    return _final_or_from_pair(trace, d, H, k, step2, budget=budget)


# ---------------------------------------------------------------------------
# one full pass


@dataclass(frozen=True)
class MainFiniteOutcome:
    """Result of one engine pass (and of the drivers built on it).

    kind is SUBSET, OR_WITNESS, LOOP or QUOTIENT_LOOP; the optional fields
    carry whichever payload the kind needs.
    """

    kind: str
    trace: DerivationTrace = None
    subset: frozenset = None
    subset_step: str = None
    relation: Relation = None
    alpha: Relation = None
    carrier: frozenset = None
    or_step: str = None
    loop_vertices: frozenset = None
    quotient_class: frozenset = None
    rounds: tuple = ()
    parameters: tuple = ()
    notes: dict = field(default_factory=dict)


def validate_outcome(out: MainFiniteOutcome, d: Digraph, k: int) -> None:
    """Brute-force checks of an outcome's payload against the digraph."""
    n = d.domain_size
    if out.kind == "SUBSET":
        B = out.subset
        if not B or len(B) >= n:
            raise InternalCheckError("subset outcome must be proper and nonempty")
        sub, _ = d.restrict(B)
        if not sub.is_smooth():
            raise InternalCheckError("subset outcome is not smooth")
        _, linked = dianalysis.link_equivalence_bfs(sub, k)
        if not linked:
            raise InternalCheckError("subset outcome is not linked at this k")
    elif out.kind == "OR_WITNESS":
        B = out.carrier
        if not is_equivalence_on(out.alpha, B):
            raise InternalCheckError("witness pair relation is not an equivalence")
        if out.alpha == Relation(
            2, frozenset(itertools.product(sorted(B), repeat=2))
        ):
            raise InternalCheckError("witness equivalence is not proper")
        if out.relation != or_relation(out.alpha, out.alpha, n, universe=B):
            raise InternalCheckError("witness relation is not the stated disjunction")
    elif out.kind == "LOOP":
        for v in out.loop_vertices:
            if (v, v) not in d.edges:
                raise InternalCheckError("claimed loop vertex has no loop")
    elif out.kind == "QUOTIENT_LOOP":
        if not out.quotient_class:
            raise InternalCheckError("empty quotient loop class")
    else:
        raise InternalCheckError(f"unknown outcome kind {out.kind!r}")


def main_finite(
    d: Digraph, H: RankedGroup, k: int, budget: int = None
) -> MainFiniteOutcome:
    """One pass: either a proper invariant linked smooth subset or a
    disjunction-of-equalities witness, with a full derivation trace."""
    n = d.domain_size
    if n < 1 or d.edges.is_empty():
        raise PreconditionError("need a nonempty digraph")
    if not d.is_smooth():
        raise PreconditionError("digraph must be smooth")
    if k < 1:
        raise PreconditionError("need k >= 1")
    if H.domain_size != n:
        raise PreconditionError("family acts on the wrong world")
    G = H.projection_group()
    for g in G.generators:
        if transport_relation(d.edges, g) != d.edges:
            raise PreconditionError("the family must act by automorphisms")
    _, linked = dianalysis.link_equivalence_bfs(d, k)
    if not linked:
        raise PreconditionError("digraph is not linked at this k")
    if relation_power(d.edges, k).is_full(n):
        raise PreconditionError("the k-th power is already everything")

    trace = DerivationTrace(n, G)
    edge_step = trace.add_input("edge", d.edges, (0, 1))
    trace.edge_step = edge_step

    refined = refine_to_central_or_q(trace, d, H, k, edge_step)
    if refined.kind == "CENTRAL":
        res = or_from_center(trace, d, H, k, refined.rel_step, budget=budget)
        if res["kind"] == "SUBSET":
            out = MainFiniteOutcome(
                "SUBSET",
                trace=trace,
                subset=res["subset"],
                subset_step=res["subset_step"],
            )
            validate_outcome(out, d, k)
            return out
        up = or_upgrade(trace, d, H, k, res["or_step"], res["T"], budget=budget)
    else:
        resq = or_from_q(trace, refined.rel_step, refined.alpha_step, G)
        up = or_upgrade(trace, d, H, k, resq["or_step"], resq["T"], budget=budget)

    if up["kind"] == "SUBSET":
        out = MainFiniteOutcome(
            "SUBSET",
            trace=trace,
            subset=up["subset"],
            subset_step=up["subset_step"],
        )
        validate_outcome(out, d, k)
        return out

    final_step = up["or_step"]
    if any(r != 0 for r in trace[final_step].ranking):
        raise InternalCheckError("final witness is not rank-free")
    out = MainFiniteOutcome(
        "OR_WITNESS",
        trace=trace,
        relation=trace[final_step].relation,
        alpha=up["alpha"],
        carrier=up["carrier"],
        or_step=final_step,
    )
    validate_outcome(out, d, k)
    return out


# ---------------------------------------------------------------------------
# driver: iterate the engine down to a loop


def loop_driver(d: Digraph, G: PermGroup = None, budget: int = None) -> MainFiniteOutcome:
    """Shrink the digraph round by round until every vertex of the current
    restriction carries a loop, or a disjunction witness appears.

    Each round runs one engine pass at k = 1.  A SUBSET outcome restricts
    the digraph and the group and plays again; restrictions are strict, so
    there are at most n rounds.  Relations in an OR_WITNESS outcome are
    re-labelled back to the original vertex names.
    """
    n0 = d.domain_size
    if n0 < 1 or d.edges.is_empty():
        raise PreconditionError("need a nonempty digraph")
    if not d.is_smooth():
        raise PreconditionError("digraph must be smooth")
    if G is None:
        G = PermGroup.trivial(n0)
    if G.domain_size != n0:
        raise PreconditionError("group acts on the wrong world")
    for g in G.generators:
        if transport_relation(d.edges, g) != d.edges:
            raise PreconditionError("the group must act by automorphisms")

    cur, curG = d, G
    abs_of = list(range(n0))
    rounds = []
    for _ in range(n0 + 1):
        nc = cur.domain_size
        if cur.edges.is_full(nc):
            out = MainFiniteOutcome(
                "LOOP",
                loop_vertices=frozenset(abs_of),
                rounds=tuple(rounds),
                notes={"rounds": len(rounds)},
            )
            validate_outcome(out, d, 1)
            return out
        step = main_finite(cur, RankedGroup.constant(curG), 1, budget=budget)
        rounds.append(
            {"vertices": tuple(abs_of), "k": 1, "kind": step.kind, "outcome": step}
        )
        if step.kind == "OR_WITNESS":
            ren = {i: abs_of[i] for i in range(nc)}
            out = MainFiniteOutcome(
                "OR_WITNESS",
                trace=step.trace,
                relation=step.relation.reindex(ren),
                alpha=step.alpha.reindex(ren),
                carrier=frozenset(abs_of[v] for v in step.carrier),
                or_step=step.or_step,
                rounds=tuple(rounds),
                notes={"rounds": len(rounds)},
            )
            validate_outcome(out, d, 1)
            return out
        B = step.subset
        for g in curG.generators:
            if {g[v] for v in B} != B:
                raise InternalCheckError("walk subset is not group invariant")
        sub, emb = cur.restrict(B)
        curG = curG.restrict(sorted(B))
        abs_of = [abs_of[v] for v in emb]
        cur = sub
    raise InternalCheckError("restriction rounds failed to terminate")


# ---------------------------------------------------------------------------
# re-deriving a trace on a larger world, and untwisting a twisted one


def _ren_rel_names(f: RPPFormula, mapping: dict) -> RPPFormula:
    atoms = tuple(
        Atom.rel(mapping.get(a.name, a.name), *a.vars) if a.kind == REL else a
        for a in f.atoms
    )
    return RPPFormula(
        f.free_vars, f.bound_vars, atoms, {v: f.rank(v) for v in f.all_vars}
    )


def _unrelabel_trace(
    master: DerivationTrace,
    child: DerivationTrace,
    embed,
    edge_master: str,
    budget: int = None,
) -> dict:
    """Re-derive a trace produced on a restricted world on the host trace.

    embed[child vertex] = host vertex.  The child's edge input is identified
    with the host step named edge_master (whose relation must be the embedded
    child edge set); every formula step is re-added with relation atoms
    renamed, parameters pushed through the embedding, and orbit pins of the
    child's trivial group turned into explicit parameters.  Returns the map
    from child step names to host step names.

    Soundness rests on confinement: every variable must be anchored to the
    restricted world by some non-equality atom (possibly through a chain of
    equalities), so the formula evaluates inside the embedded image and the
    host relation is exactly the embedded child relation.  That is checked
    per step, as is the re-evaluated relation.
    """
    if not child.group.is_trivial():
        raise InternalCheckError("can only unrelabel traces over a trivial group")
    ren_val = {i: embed[i] for i in range(child.world_size)}
    name_map = {}
    edge_seen = False
    for st in child.steps:
        if st.kind == "input":
            if edge_seen:
                raise InternalCheckError("restricted trace has an extra input")
            edge_seen = True
            host = master[edge_master]
            if host.relation != st.relation.reindex(ren_val):
                raise InternalCheckError("host edge step does not embed the child edge")
            if host.ranking != st.ranking:
                raise InternalCheckError("host edge step is ranked differently")
            name_map[st.name] = edge_master
            continue
        if st.kind != "formula":
            raise InternalCheckError(
                f"cannot unrelabel a step of kind {st.kind!r}"
            )
        f = st.formula
        new_atoms = []
        for a in f.atoms:
            if a.kind == REL:
                if a.name not in name_map:
                    raise InternalCheckError(f"forward reference to {a.name!r}")
                new_atoms.append(Atom.rel(name_map[a.name], *a.vars))
            elif a.kind == EQ:
                new_atoms.append(a)
            elif a.kind == PARAM:
                new_atoms.append(Atom.param(ren_val[a.value], a.vars[0]))
            elif a.kind == ORBIT:
                for j, v in enumerate(a.vars):
                    new_atoms.append(Atom.param(ren_val[j], v))
            else:
                raise InternalCheckError(f"unknown atom kind {a.kind!r}")
        anchored = {v for a in new_atoms if a.kind != EQ for v in a.vars}
        changed = True
        while changed:
            changed = False
            for a in new_atoms:
                if a.kind == EQ:
                    u, v = a.vars
                    if (u in anchored) != (v in anchored):
                        anchored.update((u, v))
                        changed = True
        loose = [v for v in f.free_vars + f.bound_vars if v not in anchored]
        if loose:
            raise InternalCheckError(
                f"variables {loose} are not anchored to the restricted world"
            )
        f2 = make_formula(
            f.free_vars, f.bound_vars, new_atoms,
            {v: f.rank(v) for v in f.all_vars},
        )
        name_map[st.name] = master.add_formula(
            st.rule, f2,
            expect=st.relation.reindex(ren_val),
            note=st.note,
            budget=budget,
        )
    return name_map


def _translate_trace(t1: DerivationTrace, gstar, budget: int = None):
    """Rewrite a trace over a twisted edge into one over the plain edge.

    t1 must start with the plain edge input followed by the twisted edge
    built from it via the automorphism gstar.  In the output trace a
    variable at rank r stands for the r-fold untwisting of its old value:
    twisted-edge atoms become plain-edge atoms (gstar preserves the edge
    set), parameters move accordingly, and a step used at a nonzero shift
    gains an explicit transport step.  Expected relations move coordinate
    by coordinate, so a step whose declared ranking is all zero keeps its
    relation verbatim.  Returns (new trace, child name -> new name map).
    """
    steps = t1.steps
    if (
        len(steps) < 2
        or steps[0].kind != "input"
        or steps[1].kind != "edge_plus_automorphism"
    ):
        raise InternalCheckError("translation needs the twisted-edge layout")
    if tuple(steps[1].data["g"]) != tuple(gstar):
        raise InternalCheckError("trace was twisted by a different automorphism")
    t2 = DerivationTrace(t1.world_size, t1.group)
    e0 = t2.add_input(steps[0].rule, steps[0].relation, (0, 0), note=steps[0].note)
    t2.edge_step = e0
    name_map = {steps[0].name: e0}
    twisted = steps[1].name
    shift_steps = {}
    for st in steps[2:]:
        if st.kind != "formula":
            raise InternalCheckError(
                f"cannot translate a step of kind {st.kind!r}"
            )
        # rewrite against the old names first, then rename everything in one
        # pass (old names and the new ones share the same shape, so renaming
        # before the rewrite would let a fresh name shadow an old one)
        rels = {old: t2[new].relation for old, new in name_map.items()}
        brk = {old: t1[old].ranking for old in name_map}
        f2, extra = rpp_to_pp(
            st.formula,
            gstar,
            rels,
            edge_names=(twisted,),
            base_rankings=brk,
            group=t1.group,
            edge_rename={twisted: "@edge"},
        )
        ren = dict(name_map)
        ren["@edge"] = e0
        for key in sorted(extra):
            if key not in shift_steps:
                src_old, c = key.rsplit("@", 1)
                ts = t2.add_transport(
                    "untwist", name_map[src_old], perm_power(gstar, -int(c)),
                    note=f"rank shift {c}",
                )
                if t2[ts].relation != extra[key]:
                    raise InternalCheckError("transport step drifted from its image")
                shift_steps[key] = ts
            ren[key] = shift_steps[key]
        f3 = _ren_rel_names(f2, ren)
        expect = transport_relation_per_coord(
            st.relation, [perm_power(gstar, -r) for r in st.ranking]
        )
        name_map[st.name] = t2.add_formula(
            st.rule, f3, expect=expect, note=st.note, budget=budget
        )
    return t2, name_map


# ---------------------------------------------------------------------------
# driver: pseudoloop search through a quotient walk


def _quotient_walk(q: Digraph, comp, window: int):
    """Shortest walk in the (class, net length) graph from (c0, 0) to
    (c0, 1), c0 the least class of the component.  Returns a list of moves
    ('f' or 'b', class); deterministic via sorted forward-first expansion."""
    c0 = comp[0]
    start, goal = (c0, 0), (c0, 1)
    parent = {start: None}
    frontier = [start]
    while frontier and goal not in parent:
        nxt = []
        for state in frontier:
            c, t = state
            moves = [("f", w, t + 1) for w in sorted(q.successors(c))]
            moves += [("b", w, t - 1) for w in sorted(q.predecessors(c))]
            for mv, w, t2 in moves:
                if abs(t2) > window:
                    continue
                s2 = (w, t2)
                if s2 not in parent:
                    parent[s2] = (state, mv)
                    nxt.append(s2)
            if goal in parent:
                break
        frontier = nxt
    if goal not in parent:
        raise InternalCheckError(
            "no walk of net length one within the window; "
            "the component's closed walks cannot reach gcd one"
        )
    out = []
    cur = goal
    while parent[cur] is not None:
        prev, mv = parent[cur]
        out.append((mv, cur[0]))
        cur = prev
    return list(reversed(out))


def _lift_walk(d: Digraph, orbit_of, a0: int, moves):
    """Lift a quotient walk to the digraph, always taking the least
    neighbour inside the target class."""
    cur = a0
    out = [a0]
    for mv, cls in moves:
        if mv == "f":
            cands = [w for w in d.successors(cur) if orbit_of[w] == cls]
        else:
            cands = [w for w in d.predecessors(cur) if orbit_of[w] == cls]
        if not cands:
            raise InternalCheckError("walk lift got stuck between classes")
        cur = min(cands)
        out.append(cur)
    return out


def _closure_pin_step(
    trace: DerivationTrace,
    edge_step: str,
    k: int,
    n_links: int,
    pin: int,
    expect: Relation,
    rule: str,
    confine_step: str = None,
    budget: int = None,
) -> str:
    """Unary step: vertices joined to the pinned one by a chain of shared
    k-walk targets, optionally confined to an earlier unary step."""
    _link, closure = make_link_formulas(k, n_links, edge=edge_step)
    last = closure.free_vars[1]
    atoms = list(closure.atoms)
    if confine_step is not None:
        for v in closure.free_vars + closure.bound_vars:
            atoms.append(Atom.rel(confine_step, v))
    atoms.append(Atom.param(pin, last))
    ranks = {v: closure.rank(v) for v in closure.free_vars + closure.bound_vars}
    f = make_formula(
        (closure.free_vars[0],),
        tuple(closure.bound_vars) + (last,),
        atoms,
        ranks,
    )
    return trace.add_formula(rule, f, expect=expect, budget=budget)


def _restrict_edge_step(
    trace: DerivationTrace,
    edge_step: str,
    dom_step: str,
    expect: Relation,
    budget: int = None,
) -> str:
    f = make_formula(
        ("x", "y"),
        (),
        [
            Atom.rel(edge_step, "x", "y"),
            Atom.rel(dom_step, "x"),
            Atom.rel(dom_step, "y"),
        ],
        {"y": 1},
    )
    return trace.add_formula("edge_restrict", f, expect=expect, budget=budget)


def _pseudoloop_fallback(
    trace: DerivationTrace,
    sub: Digraph,
    embed,
    edge_step: str,
    k: int,
    budget: int = None,
) -> dict:
    """When the working power already joins every pair, carve out a smaller
    piece: reach sets of exact walks from single vertices (then pairwise
    intersections of those), smoothed and closed off into one component.

    Returns the steps and the new working domain, or raises FallbackFailed
    when no reach set leads anywhere.
    """
    ns = sub.domain_size
    singles = {}
    cands = []
    for m in range(1, ns + 1):
        pw = relation_power(sub.edges, m)
        for a in range(ns):
            V = frozenset(b for b in range(ns) if (a, b) in pw)
            singles[(m, a)] = V
            cands.append((((m, a),), V))
    keys = sorted(singles)
    for i, k1 in enumerate(keys):
        for k2 in keys[i + 1:]:
            cands.append(((k1, k2), singles[k1] & singles[k2]))

    tried = 0
    chosen = None
    for spec, V in cands:
        if not V or len(V) == ns:
            continue
        tried += 1
        W = dianalysis.smooth_part(sub, V)
        if not W:
            continue
        subW, embW = sub.restrict(W)
        reports = dianalysis.components_and_algebraic_length(subW)
        good = [r for r in reports if r.has_algebraic_length_1]
        if not good:
            continue
        comp = min(good, key=lambda r: r.vertices[0])
        D2 = frozenset(embW[v] for v in comp.vertices)
        subD, _embD = sub.restrict(D2)
        k2 = dianalysis.minimal_linked_k(subD)
        if k2 is None:
            continue
        chosen = (spec, V, W, D2, k2)
        break
    if chosen is None:
        raise FallbackFailed(
            f"no exact-walk reach set leads to a usable component "
            f"({tried} proper candidates inspected)"
        )
    spec, V, W, D2, k2 = chosen

    # reach set of the chosen exact walks
    atoms = []
    bound = []
    ranks = {"x": 0}
    for bi, (m, a) in enumerate(spec):
        ps = [f"c{bi}p{i}" for i in range(m)]
        atoms.append(Atom.param(embed[a], ps[0]))
        chain = ps + ["x"]
        for i in range(m):
            atoms.append(Atom.rel(edge_step, chain[i], chain[i + 1]))
        for i, v in enumerate(ps):
            ranks[v] = i - m
        bound.extend(ps)
    f_reach = make_formula(("x",), bound, atoms, ranks)
    u1 = trace.add_formula(
        "exact_walk", f_reach,
        expect=Relation(1, frozenset((embed[b],) for b in V)),
        budget=budget,
    )

    # its smooth part, by pumping walks of length |V| inside the reach set
    L = len(V)
    ins = [f"wi{j}" for j in range(1, L + 1)]
    outs = [f"wo{j}" for j in range(1, L + 1)]
    pump_ranks = {"wb": 0}
    for j, v in enumerate(ins, start=1):
        pump_ranks[v] = j - L - 1
    for j, v in enumerate(outs, start=1):
        pump_ranks[v] = j
    walk = ins + ["wb"] + outs
    pump_atoms = [
        Atom.rel(edge_step, walk[i], walk[i + 1]) for i in range(len(walk) - 1)
    ]
    pump_atoms += [Atom.rel(u1, v) for v in walk]
    f_pump = make_formula(("wb",), ins + outs, pump_atoms, pump_ranks)
    u2 = trace.add_formula(
        "smooth_pump", f_pump,
        expect=Relation(1, frozenset((embed[b],) for b in W)),
        budget=budget,
    )

    # one linked component of the smooth part, closed off from its least vertex
    d2_abs = frozenset(embed[b] for b in D2)
    dcl = _closure_pin_step(
        trace, edge_step, k2, max(1, len(D2) - 1),
        pin=min(d2_abs),
        expect=Relation(1, frozenset((v,) for v in d2_abs)),
        rule="link_closure_pin",
        confine_step=u2,
        budget=budget,
    )
    e_old = trace[edge_step].relation
    e_new = Relation(
        2, frozenset(t for t in e_old.tuples if t[0] in d2_abs and t[1] in d2_abs)
    )
    er = _restrict_edge_step(trace, edge_step, dcl, expect=e_new, budget=budget)
    return {
        "dom_step": dcl,
        "edge_step": er,
        "domain": d2_abs,
        "choice": spec,
        "steps": {"reach": u1, "smooth": u2, "closure": dcl, "edge": er},
    }


def pseudoloop_driver(d: Digraph, G: PermGroup = None, budget: int = None) -> MainFiniteOutcome:
    """Find a loop in the quotient by the symmetry group, or a definable
    disjunction witness on the original world.

    When the quotient digraph is loopless, some quotient component must
    contain a closed walk of net length one.  Walking it, lifting the walk,
    and composing the edge set with a symmetry that closes the lift gives a
    twisted edge relation whose component through the base vertex has net
    length one; the loop driver machinery runs there round by round, and the
    resulting trace is translated back to the plain edge relation.
    """
    n = d.domain_size
    if n < 1 or d.edges.is_empty():
        raise PreconditionError("need a nonempty digraph")
    if not d.is_smooth():
        raise PreconditionError("digraph must be smooth")
    if G is None:
        G = PermGroup.trivial(n)
    if G.domain_size != n:
        raise PreconditionError("group acts on the wrong world")
    for g in G.generators:
        if transport_relation(d.edges, g) != d.edges:
            raise PreconditionError("the group must act by automorphisms")

    q, orbit_of = quotient(d, G)
    if q.has_loop():
        i = q.loops()[0]
        cls = frozenset(v for v in range(n) if orbit_of[v] == i)
        tr = DerivationTrace(n, PermGroup.trivial(n))
        tr.edge_step = tr.add_input("edge", d.edges, (0, 1))
        out = MainFiniteOutcome(
            "QUOTIENT_LOOP",
            trace=tr,
            quotient_class=cls,
            notes={"quotient_size": q.domain_size, "class_index": i},
        )
        validate_outcome(out, d, 1)
        return out

    reports = dianalysis.components_and_algebraic_length(q)
    good = [r for r in reports if r.has_algebraic_length_1]
    if not good:
        raise PreconditionError(
            "no quotient component has a closed walk of net length one"
        )
    comp = min(good, key=lambda r: r.vertices[0])
    moves = _quotient_walk(q, comp.vertices, 4 * n * n + 4)
    c0 = comp.vertices[0]
    a0 = min(v for v in range(n) if orbit_of[v] == c0)
    lift = _lift_walk(d, orbit_of, a0, moves)
    am = lift[-1]
    if orbit_of[am] != c0:
        raise InternalCheckError("lifted walk ends outside the start class")
    gstar = min(g for g in G.elements if g[am] == a0)

    t1 = DerivationTrace(n, PermGroup.trivial(n))
    e0 = t1.add_input("edge", d.edges, (0, 1))
    t1.edge_step = e0
    e1 = t1.add_edge_plus_automorphism(
        "edge_twist", e0, gstar, note="edge set composed with a symmetry"
    )
    d1 = Digraph.from_relation(n, t1[e1].relation)
    if d1.has_loop():
        raise InternalCheckError("twisted edge set has a loop despite the quotient")
    if not d1.is_smooth():
        raise InternalCheckError("twisted edge set lost smoothness")
    comps1 = dianalysis.components_and_algebraic_length(d1)
    mine = [r for r in comps1 if a0 in r.vertices]
    if not mine or not mine[0].has_algebraic_length_1:
        raise InternalCheckError(
            "the base vertex's twisted component lacks net length one"
        )
    D1 = frozenset(mine[0].vertices)

    sub, emb = d1.restrict(D1)
    k0 = dianalysis.minimal_linked_k(sub)
    if k0 is None:
        raise InternalCheckError("twisted component never links up")
    dom_step = _closure_pin_step(
        t1, e1, k0, max(1, len(D1) - 1),
        pin=a0,
        expect=Relation(1, frozenset((v,) for v in D1)),
        rule="link_closure_pin",
        budget=budget,
    )
    e_cur = Relation(
        2, frozenset(t for t in t1[e1].relation.tuples if t[0] in D1 and t[1] in D1)
    )
    edge_cur = _restrict_edge_step(t1, e1, dom_step, expect=e_cur, budget=budget)

    rounds = [{"kind": "TWIST", "automorphism": tuple(gstar), "domain": tuple(sorted(D1))}]
    embed_abs = list(emb)
    witness = None
    for _ in range(2 * n + 4):
        kr = dianalysis.minimal_linked_k(sub)
        if kr is None:
            raise InternalCheckError("working component never links up")
        if relation_power(sub.edges, kr).is_full(sub.domain_size):
            fb = _pseudoloop_fallback(t1, sub, embed_abs, edge_cur, kr, budget=budget)
            rounds.append(
                {
                    "kind": "FALLBACK",
                    "k": kr,
                    "choice": fb["choice"],
                    "domain": tuple(sorted(fb["domain"])),
                }
            )
            dom_step = fb["dom_step"]
            edge_cur = fb["edge_step"]
            d_abs = Digraph.from_relation(n, t1[edge_cur].relation)
            sub, embed_abs = d_abs.restrict(fb["domain"])
            continue
        child = main_finite(
            sub,
            RankedGroup.constant(PermGroup.trivial(sub.domain_size)),
            kr,
            budget=budget,
        )
        nm = _unrelabel_trace(t1, child.trace, embed_abs, edge_cur, budget=budget)
        rounds.append(
            {
                "kind": child.kind,
                "k": kr,
                "domain": tuple(embed_abs),
            }
        )
        if child.kind == "OR_WITNESS":
            ren = {i: embed_abs[i] for i in range(sub.domain_size)}
            witness = {
                "step_t1": nm[child.or_step],
                "relation": child.relation.reindex(ren),
                "alpha": child.alpha.reindex(ren),
                "carrier": frozenset(embed_abs[v] for v in child.carrier),
            }
            break
        dom_step = nm[child.subset_step]
        new_dom = frozenset(embed_abs[v] for v in child.subset)
        e_old = t1[edge_cur].relation
        e_new = Relation(
            2,
            frozenset(t for t in e_old.tuples if t[0] in new_dom and t[1] in new_dom),
        )
        edge_cur = _restrict_edge_step(t1, edge_cur, dom_step, expect=e_new, budget=budget)
        d_abs = Digraph.from_relation(n, e_new)
        sub, embed_abs = d_abs.restrict(new_dom)
    if witness is None:
        raise InternalCheckError("restriction rounds failed to terminate")

    t2, tmap = _translate_trace(t1, gstar, budget=budget)
    final = tmap[witness["step_t1"]]
    if any(r != 0 for r in t2[final].ranking):
        raise InternalCheckError("translated witness is not rank-free")
    if t2[final].relation != witness["relation"]:
        raise InternalCheckError("translation changed the witness relation")
    params = sorted(
        {
            a.value
            for st in t2.steps
            if st.formula is not None
            for a in st.formula.atoms
            if a.kind == PARAM
        }
    )
    out = MainFiniteOutcome(
        "OR_WITNESS",
        trace=t2,
        relation=witness["relation"],
        alpha=witness["alpha"],
        carrier=witness["carrier"],
        or_step=final,
        rounds=tuple(rounds),
        parameters=tuple(params),
        notes={
            "automorphism": tuple(gstar),
            "walk": tuple(lift),
            "quotient_size": q.domain_size,
        },
    )
    validate_outcome(out, d, 1)
    return out


# ---------------------------------------------------------------------------
# collapsing a disjunction witness to an interpretation of the triangle


@dataclass(frozen=True)
class PPInterpretation:
    """A definable interpretation of the three-element complete graph.

    The quotient of the carrier by the witness equivalence hosts the
    disjunction-of-equalities relation; formulas over that quotient pick out
    a copy of the triangle, and each has a pullback over the original world
    written against the witness relation itself.  value_tuples lists, per
    triangle vertex, the quotient tuple representing it.
    """

    dimension: int
    target: str
    value_tuples: tuple
    class_reps: tuple
    carrier: frozenset
    alpha: Relation
    quotient_size: int
    quotient_or: Relation
    quotient_formulas: dict
    pullback_formulas: dict
    dependency_report: dict


_DEP_CONSTRAINT_CAP = 300_000


def _ops_brute(rel: Relation, n: int, arity: int):
    """All operations of the given arity compatible with rel, by direct
    enumeration.  Only sensible for a two-element domain."""
    verts = sorted(itertools.product(range(n), repeat=arity))
    idx = {t: i for i, t in enumerate(verts)}
    combos = list(itertools.product(sorted(rel.tuples), repeat=arity))
    ops = []
    for vals in itertools.product(range(n), repeat=len(verts)):
        ok = True
        for combo in combos:
            img = tuple(
                vals[idx[tuple(combo[j][i] for j in range(arity))]]
                for i in range(rel.arity)
            )
            if img not in rel:
                ok = False
                break
        if ok:
            ops.append(vals)
    return verts, ops


def _ops_preserving(rel: Relation, n: int, arity: int, budget: int = None):
    """All operations of the given arity compatible with rel, via a
    homomorphism search on the indicator power."""
    constraints = len(rel.tuples) ** arity
    if constraints > _DEP_CONSTRAINT_CAP:
        raise BudgetExceeded(
            f"dependency audit needs {constraints} constraints at arity {arity}, "
            f"cap is {_DEP_CONSTRAINT_CAP}"
        )
    verts = sorted(itertools.product(range(n), repeat=arity))
    idx = {t: i for i, t in enumerate(verts)}
    tuples = set()
    for combo in itertools.product(sorted(rel.tuples), repeat=arity):
        tuples.add(
            tuple(
                idx[tuple(combo[j][i] for j in range(arity))]
                for i in range(rel.arity)
            )
        )
    power = Structure(len(verts), {"R": Relation(rel.arity, frozenset(tuples))})
    target = Structure(n, {"R": rel})
    ops = []
    _hom_search(
        power, target, budget or 50_000_000, lambda m: ops.append(m) or False
    )
    return verts, ops


def _essentially_unary(verts, op, arity: int) -> bool:
    for i in range(arity):
        seen = {}
        ok = True
        for t, val in zip(verts, op):
            if seen.setdefault(t[i], val) != val:
                ok = False
                break
        if ok:
            return True
    return False


def _dependency_report(o4q: Relation, csize: int, budget: int = None) -> dict:
    """Verify that every compatible operation of arity up to three depends
    on one coordinate only, and count them."""
    counts = {}
    for ar in (1, 2, 3):
        if csize == 2:
            verts, ops = _ops_brute(o4q, csize, ar)
        else:
            verts, ops = _ops_preserving(o4q, csize, ar, budget)
        for op in ops:
            if not _essentially_unary(verts, op, ar):
                raise InternalCheckError(
                    f"an arity-{ar} compatible operation mixes coordinates; "
                    "the disjunction relation does not force unary behaviour"
                )
        counts[ar] = len(ops)
    return {
        "arity_counts": counts,
        "all_essentially_unary": True,
        "checked_arities": (1, 2, 3),
    }


def _in_set_atoms(x: str, values, tag: str, relname: str = "O4q"):
    """Atoms pinning x into the given value set, with the set's members as
    pinned bound variables and a flattened chain of disjunction atoms."""
    values = tuple(values)
    m = len(values)
    if m == 0:
        raise InternalCheckError("empty membership set")
    if m == 1:
        return [Atom.param(values[0], x)], []
    pvars = [f"{tag}a{i}" for i in range(m)]
    atoms = [Atom.param(c, pvars[i]) for i, c in enumerate(values)]
    bound = list(pvars)
    zs = [f"{tag}z{i}" for i in range(2, m)]
    bound.extend(zs)
    if m == 2:
        atoms.append(Atom.rel(relname, x, pvars[0], x, pvars[1]))
    else:
        atoms.append(Atom.rel(relname, x, pvars[0], x, zs[0]))
        for j in range(1, m - 2):
            atoms.append(Atom.rel(relname, zs[j - 1], pvars[j], x, zs[j]))
        atoms.append(Atom.rel(relname, zs[-1], pvars[m - 2], x, pvars[m - 1]))
    return atoms, bound


def _k3_gadgets_two_classes() -> dict:
    """Triangle gadgets over a two-class quotient: dimension two, universe
    the pairs with a zero coordinate."""
    delta = make_formula(
        ("x1", "x2"),
        ("w0",),
        [Atom.param(0, "w0"), Atom.rel("O4q", "x1", "w0", "x2", "w0")],
        {},
    )
    ne = make_formula(
        ("x1", "x2", "y1", "y2"),
        ("a0", "b1", "u", "v"),
        [
            Atom.param(0, "a0"),
            Atom.param(1, "b1"),
            Atom.rel("O4q", "x1", "a0", "x2", "a0"),
            Atom.rel("O4q", "y1", "a0", "y2", "a0"),
            # u is forced to the value y1 misses, v to the one y2 misses
            Atom.rel("O4q", "u", "a0", "a0", "y1"),
            Atom.rel("O4q", "u", "b1", "b1", "y1"),
            Atom.rel("O4q", "v", "a0", "a0", "y2"),
            Atom.rel("O4q", "v", "b1", "b1", "y2"),
            Atom.rel("O4q", "x1", "u", "x2", "v"),
        ],
        {},
    )
    eq = make_formula(
        ("x1", "x2", "y1", "y2"),
        ("a0",),
        [
            Atom.param(0, "a0"),
            Atom.rel("O4q", "x1", "a0", "x2", "a0"),
            Atom.rel("O4q", "y1", "a0", "y2", "a0"),
            Atom.eq("x1", "y1"),
            Atom.eq("x2", "y2"),
        ],
        {},
    )
    return {
        "dimension": 2,
        "value_tuples": ((0, 0), (0, 1), (1, 0)),
        "formulas": {"delta": delta, "ne": ne, "eq": eq},
    }


def _k3_gadgets_point(csize: int) -> dict:
    """Triangle gadgets over a quotient with at least three classes:
    dimension one, universe the first three classes."""
    first3 = (0, 1, 2)

    def delta_atoms(x, tag):
        return _in_set_atoms(x, first3, tag)

    da, db = delta_atoms("x", "d")
    delta = make_formula(("x",), tuple(db), da, {})

    def excl_atoms(x, y, c, tag):
        others = tuple(v for v in range(csize) if v != c)
        at, bd = _in_set_atoms(f"{tag}z", others, tag)
        at = [Atom.rel("O4q", f"{tag}z", x, f"{tag}z", y)] + at
        return at, [f"{tag}z"] + bd

    ne_atoms, ne_bound = delta_atoms("x", "dx")
    at2, bd2 = delta_atoms("y", "dy")
    ne_atoms += at2
    ne_bound += bd2
    for c in first3:
        at3, bd3 = excl_atoms("x", "y", c, f"e{c}")
        ne_atoms += at3
        ne_bound += bd3
    ne = make_formula(("x", "y"), tuple(ne_bound), ne_atoms, {})

    eq_atoms, eq_bound = delta_atoms("x", "dx")
    at4, bd4 = delta_atoms("y", "dy")
    eq_atoms += at4
    eq_bound += bd4
    eq_atoms.append(Atom.eq("x", "y"))
    eq = make_formula(("x", "y"), tuple(eq_bound), eq_atoms, {})
    return {
        "dimension": 1,
        "value_tuples": ((0,), (1,), (2,)),
        "formulas": {"delta": delta, "ne": ne, "eq": eq},
    }


def _pullback_formula(f: RPPFormula, reps, confine_frees: bool = False) -> RPPFormula:
    """Rewrite a quotient formula against the witness relation itself.

    Disjunction atoms become witness atoms, quotient equality becomes the
    witness equivalence, and a pinned class becomes a fresh variable pinned
    to the class representative and tied in by the equivalence."""
    atoms2 = []
    extra = []
    for a in f.atoms:
        if a.kind == REL:
            atoms2.append(Atom.rel("R4", *a.vars))
        elif a.kind == EQ:
            u, v = a.vars
            atoms2.append(Atom.rel("R4", u, v, u, v))
        elif a.kind == PARAM:
            w = f"pw{len(extra)}"
            extra.append(w)
            atoms2.append(Atom.param(reps[a.value], w))
            atoms2.append(Atom.rel("R4", w, a.vars[0], w, a.vars[0]))
        else:
            raise InternalCheckError(f"unexpected atom kind {a.kind!r}")
    if confine_frees:
        for x in f.free_vars:
            atoms2.append(Atom.rel("R4", x, x, x, x))
    return make_formula(f.free_vars, tuple(f.bound_vars) + tuple(extra), atoms2, {})


def or_collapse(
    R4: Relation,
    n: int,
    core_structure: Structure = None,
    budget: int = None,
) -> PPInterpretation:
    """Turn a disjunction-of-equalities relation into an interpretation of
    the three-element complete graph.

    R4 must be, over its carrier (the reflexive points of its binary
    section), exactly 'first pair equivalent or second pair equivalent' for
    a proper equivalence.  The quotient by that equivalence is audited: all
    compatible operations of arity up to three must be essentially unary.
    Triangle gadget formulas are then built over the quotient and pulled
    back to the original world, each verified by evaluation.
    """
    if R4.arity != 4:
        raise PreconditionError("need a relation of arity four")
    alpha = Relation(
        2,
        frozenset(
            (x, y)
            for x in range(n)
            for y in range(n)
            if (x, y, x, y) in R4
        ),
    )
    B = frozenset(x for x in range(n) if (x, x) in alpha)
    if not B:
        raise PreconditionError("the binary section has no reflexive points")
    if not is_equivalence_on(alpha, B):
        raise PreconditionError("the binary section is not an equivalence on the carrier")
    if alpha == Relation(2, frozenset(itertools.product(sorted(B), repeat=2))):
        raise PreconditionError("the equivalence identifies the whole carrier")
    if R4 != or_relation(alpha, alpha, n, universe=B):
        raise PreconditionError(
            "relation is not the disjunction of its binary section with itself"
        )
    if core_structure is not None and not is_core(core_structure, budget or 2_000_000):
        raise PreconditionError("the ambient structure is not a core")

    classes = _equivalence_classes(alpha.tuples, B)
    reps = tuple(min(cl) for cl in classes)
    cls_of = {}
    for ci, cl in enumerate(classes):
        for v in cl:
            cls_of[v] = ci
    csize = len(reps)
    if csize > 4:
        raise BudgetExceeded(
            f"quotient has {csize} classes; the dependency audit is capped at four"
        )
    o4q = Relation(
        4,
        frozenset(
            t
            for t in itertools.product(range(csize), repeat=4)
            if t[0] == t[1] or t[2] == t[3]
        ),
    )
    dep = _dependency_report(o4q, csize, budget)

    gadgets = _k3_gadgets_two_classes() if csize == 2 else _k3_gadgets_point(csize)
    dim = gadgets["dimension"]
    value_tuples = gadgets["value_tuples"]
    qf = gadgets["formulas"]

    env_q = EvalEnv(csize, {"O4q": o4q}, PermGroup.trivial(csize))
    got_delta = evaluate(qf["delta"], env_q, budget or DEFAULT_EVAL_BUDGET)
    if got_delta != Relation(dim, frozenset(value_tuples)):
        raise InternalCheckError("universe gadget picks the wrong tuples")
    vt = list(value_tuples)
    want_ne = frozenset(
        s + t for s in vt for t in vt if s != t
    )
    got_ne = evaluate(qf["ne"], env_q, budget or DEFAULT_EVAL_BUDGET)
    if got_ne != Relation(2 * dim, want_ne):
        raise InternalCheckError("edge gadget is not the triangle's edge set")
    want_eq = frozenset(s + s for s in vt)
    got_eq = evaluate(qf["eq"], env_q, budget or DEFAULT_EVAL_BUDGET)
    if got_eq != Relation(2 * dim, want_eq):
        raise InternalCheckError("kernel gadget is not plain equality")

    pf = {
        name: _pullback_formula(f, reps, confine_frees=(name == "delta"))
        for name, f in qf.items()
    }
    env_p = EvalEnv(n, {"R4": R4}, PermGroup.trivial(n))
    sortedB = sorted(B)

    def saturate(rel_q: Relation) -> Relation:
        tuples = frozenset(
            t
            for t in itertools.product(sortedB, repeat=rel_q.arity)
            if tuple(cls_of[x] for x in t) in rel_q
        )
        return Relation(rel_q.arity, tuples)

    for name, want_q in (
        ("delta", got_delta),
        ("ne", got_ne),
        ("eq", got_eq),
    ):
        got = evaluate(pf[name], env_p, budget or DEFAULT_EVAL_BUDGET)
        if got != saturate(want_q):
            raise InternalCheckError(
                f"pulled-back {name} gadget drifts from the quotient gadget"
            )

    return PPInterpretation(
        dimension=dim,
        target="K3",
        value_tuples=value_tuples,
        class_reps=reps,
        carrier=B,
        alpha=alpha,
        quotient_size=csize,
        quotient_or=o4q,
        quotient_formulas=qf,
        pullback_formulas=pf,
        dependency_report=dep,
    )
