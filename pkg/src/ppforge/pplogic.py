"""Primitive-positive formulas with parameters, orbit atoms and ranks.

A formula is a conjunction of atoms over free and existential variables.
Atom kinds: relation application, equality, parameter pin (a one-element
unary), and the orbit atom O whose arity is the world size.  Each
variable carries an integer rank; a plain formula has all ranks zero.

Evaluation enumerates free tuples in lexicographic order and checks
satisfiability of the bound part with forward-checking search, under a
node budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .errors import BudgetExceeded, ParseError, PreconditionError, UnknownRelation
from .relcore import OrbitRelationO, PermGroup, Relation

REL, EQ, PARAM, ORBIT = "relation", "equality", "param", "orbit_o"


@dataclass(frozen=True)
class Atom:
    kind: str
    name: Optional[str] = None  # relation name for REL atoms
    vars: tuple = ()
    value: Optional[int] = None  # pinned element for PARAM atoms

    @staticmethod
    def rel(name, *vs):
        return Atom(REL, name=name, vars=tuple(vs))

    @staticmethod
    def eq(u, v):
        return Atom(EQ, vars=(u, v))

    @staticmethod
    def param(value, v):
        return Atom(PARAM, vars=(v,), value=int(value))

    @staticmethod
    def orbit(*vs):
        return Atom(ORBIT, vars=tuple(vs))


@dataclass(frozen=True)
class RPPFormula:
    """free_vars/bound_vars are ordered; ranks default to 0 per variable."""

    free_vars: tuple
    bound_vars: tuple
    atoms: tuple
    ranks: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for v in self.free_vars + self.bound_vars:
            if v in seen:
                raise PreconditionError(f"duplicate variable {v!r}")
            seen.add(v)
        for a in self.atoms:
            for v in a.vars:
                if v not in seen:
                    raise PreconditionError(f"atom uses undeclared variable {v!r}")
        for v in self.ranks:
            if v not in seen:
                raise PreconditionError(f"rank given for undeclared variable {v!r}")
        # canonical form: zero ranks are implicit
        object.__setattr__(
            self, "ranks", {v: r for v, r in self.ranks.items() if r != 0}
        )

    def rank(self, v: str) -> int:
        return self.ranks.get(v, 0)

    @property
    def all_vars(self) -> tuple:
        return self.free_vars + self.bound_vars

    @property
    def is_equality_free(self) -> bool:
        return all(a.kind != EQ for a in self.atoms)

    @property
    def arity(self) -> int:
        return len(self.free_vars)

    def shift_ranks(self, delta: int) -> "RPPFormula":
        return RPPFormula(
            self.free_vars,
            self.bound_vars,
            self.atoms,
            {v: self.rank(v) + delta for v in self.all_vars},
        )

    def relation_names(self) -> set:
        return {a.name for a in self.atoms if a.kind == REL}


def make_formula(free, bound, atoms, ranks=None) -> RPPFormula:
    return RPPFormula(tuple(free), tuple(bound), tuple(atoms), dict(ranks or {}))


# ---------------------------------------------------------------------------
# text form
#
#   (pp (free x0 x1) (exist z0 z1) (rank (z0 1) (z1 2))
#       (and (atom E x0 z0) (eq z0 z1) (param 3 z1) (orbitO z0 z1)))
#
# The rank block lists only nonzero ranks and may be absent.


def format_formula(f: RPPFormula) -> str:
    parts = ["(free " + " ".join(f.free_vars) + ")" if f.free_vars else "(free)"]
    parts.append("(exist " + " ".join(f.bound_vars) + ")" if f.bound_vars else "(exist)")
    ranked = [(v, f.rank(v)) for v in f.all_vars if f.rank(v) != 0]
    if ranked:
        parts.append("(rank " + " ".join(f"({v} {r})" for v, r in ranked) + ")")
    body = []
    for a in f.atoms:
        if a.kind == REL:
            body.append("(atom " + a.name + "".join(" " + v for v in a.vars) + ")")
        elif a.kind == EQ:
            body.append(f"(eq {a.vars[0]} {a.vars[1]})")
        elif a.kind == PARAM:
            body.append(f"(param {a.value} {a.vars[0]})")
        else:
            body.append("(orbitO" + "".join(" " + v for v in a.vars) + ")")
    parts.append("(and " + " ".join(body) + ")" if body else "(and)")
    return "(pp " + " ".join(parts) + ")"


class _Tok:
    __slots__ = ("text", "line", "col")

    def __init__(self, text, line, col):
        self.text, self.line, self.col = text, line, col


def _tokenize(src: str):
    toks = []
    line, col = 1, 1
    i = 0
    while i < len(src):
        ch = src[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
        elif ch in " \t\r":
            col += 1
            i += 1
        elif ch in "()":
            toks.append(_Tok(ch, line, col))
            col += 1
            i += 1
        else:
            j = i
            while j < len(src) and src[j] not in " \t\r\n()":
                j += 1
            toks.append(_Tok(src[i:j], line, col))
            col += j - i
            i = j
    return toks


def _parse_sexpr(toks, pos):
    if pos >= len(toks):
        raise ParseError("unexpected end of formula")
    t = toks[pos]
    if t.text == "(":
        items = []
        pos += 1
        while pos < len(toks) and toks[pos].text != ")":
            node, pos = _parse_sexpr(toks, pos)
            items.append(node)
        if pos >= len(toks):
            raise ParseError("missing ')'", line=t.line, col=t.col)
        return (t, items), pos + 1
    if t.text == ")":
        raise ParseError("unexpected ')'", line=t.line, col=t.col)
    return t, pos + 1


def _head(node):
    if isinstance(node, tuple):
        tok, items = node
        if items and not isinstance(items[0], tuple):
            return items[0].text
    return None


def parse_formula(src: str) -> RPPFormula:
    toks = _tokenize(src)
    if not toks:
        raise ParseError("empty formula")
    node, pos = _parse_sexpr(toks, 0)
    if pos != len(toks):
        t = toks[pos]
        raise ParseError("trailing tokens after formula", line=t.line, col=t.col)
    if not isinstance(node, tuple) or _head(node) != "pp":
        raise ParseError("formula must start with (pp ...", line=toks[0].line, col=toks[0].col)
    _, items = node
    free, bound, ranks, atoms = None, None, {}, None
    for section in items[1:]:
        if not isinstance(section, tuple):
            raise ParseError(
                f"unexpected token {section.text!r} in pp body",
                line=section.line,
                col=section.col,
            )
        tok, sitems = section
        head = _head(section)
        rest = sitems[1:]
        if head == "free":
            free = tuple(x.text for x in rest)
        elif head == "exist":
            bound = tuple(x.text for x in rest)
        elif head == "rank":
            for entry in rest:
                if not isinstance(entry, tuple) or len(entry[1]) != 2:
                    raise ParseError("rank entries look like (var int)", line=tok.line)
                vtok, rtok = entry[1]
                try:
                    ranks[vtok.text] = int(rtok.text)
                except ValueError:
                    raise ParseError(
                        f"bad rank {rtok.text!r}", line=rtok.line, col=rtok.col
                    )
        elif head == "and":
            atoms = []
            for entry in rest:
                if not isinstance(entry, tuple):
                    raise ParseError(
                        f"unexpected token {entry.text!r} in (and ...)",
                        line=entry.line,
                        col=entry.col,
                    )
                etok, eitems = entry
                ehead = _head(entry)
                args = eitems[1:]
                if ehead == "atom":
                    if len(args) < 1:
                        raise ParseError("(atom ...) needs a relation name", line=etok.line)
                    name = args[0].text
                    atoms.append(Atom.rel(name, *(x.text for x in args[1:])))
                elif ehead == "eq":
                    if len(args) != 2:
                        raise ParseError("(eq u v) takes two variables", line=etok.line)
                    atoms.append(Atom.eq(args[0].text, args[1].text))
                elif ehead == "param":
                    if len(args) != 2:
                        raise ParseError("(param value var) takes two items", line=etok.line)
                    try:
                        val = int(args[0].text)
                    except ValueError:
                        raise ParseError(
                            f"param value must be an integer, got {args[0].text!r}",
                            line=args[0].line,
                            col=args[0].col,
                        )
                    atoms.append(Atom.param(val, args[1].text))
                elif ehead == "orbitO":
                    atoms.append(Atom.orbit(*(x.text for x in args)))
                else:
                    raise ParseError(
                        f"unknown atom kind {ehead!r}", line=etok.line, col=etok.col
                    )
        else:
            raise ParseError(f"unknown section {head!r}", line=tok.line, col=tok.col)
    if free is None or bound is None or atoms is None:
        raise ParseError("formula needs (free ...), (exist ...) and (and ...) sections")
    try:
        return make_formula(free, bound, atoms, ranks)
    except PreconditionError as e:
        raise ParseError(str(e))


# ---------------------------------------------------------------------------
# evaluation


class EvalEnv:
    """Relation environment for evaluation: named relations over a common
    domain, plus an optional group interpreting the orbit atom."""

    def __init__(self, domain_size: int, relations: Mapping[str, Relation], group: PermGroup = None):
        self.domain_size = domain_size
        self.relations = dict(relations)
        self.group = group

    def with_extra(self, extra: Mapping[str, Relation]) -> "EvalEnv":
        merged = dict(self.relations)
        merged.update(extra)
        return EvalEnv(self.domain_size, merged, self.group)


DEFAULT_EVAL_BUDGET = 10_000_000


class _Budget:
    __slots__ = ("left",)

    def __init__(self, n):
        self.left = n

    def tick(self, k=1):
        self.left -= k
        if self.left < 0:
            raise BudgetExceeded("formula evaluation exceeded its node budget")


def evaluate(f: RPPFormula, env: EvalEnv, budget: int = DEFAULT_EVAL_BUDGET) -> Relation:
    """Evaluate to the relation over free_vars (declared order)."""
    n = env.domain_size
    bud = _Budget(budget)

    # union-find over variables driven by equality atoms
    parent = {v: v for v in f.all_vars}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a in f.atoms:
        if a.kind == EQ:
            ru, rv = find(a.vars[0]), find(a.vars[1])
            if ru != rv:
                parent[ru] = rv

    rep = {v: find(v) for v in f.all_vars}
    rep_vars = sorted({rep[v] for v in f.all_vars}, key=f.all_vars.index)

    # per-representative unary domains
    domains = {v: set(range(n)) for v in rep_vars}

    rel_atoms = []
    orbit_atoms = []
    for a in f.atoms:
        if a.kind == PARAM:
            if not (0 <= a.value < n):
                raise PreconditionError(f"parameter {a.value} outside domain of size {n}")
            domains[rep[a.vars[0]]] &= {a.value}
        elif a.kind == REL:
            if a.name not in env.relations:
                raise UnknownRelation(f"relation {a.name!r} not in evaluation environment")
            R = env.relations[a.name]
            if R.arity != len(a.vars):
                raise PreconditionError(
                    f"atom {a.name} applied to {len(a.vars)} vars, arity is {R.arity}"
                )
            vs = tuple(rep[v] for v in a.vars)
            if R.arity == 1:
                domains[vs[0]] &= {t[0] for t in R.tuples}
            else:
                rel_atoms.append((vs, R))
        elif a.kind == ORBIT:
            if env.group is None:
                raise PreconditionError("formula has an orbit atom but no group was supplied")
            if len(a.vars) != n:
                raise PreconditionError(
                    f"orbit atom has {len(a.vars)} variables, world size is {n}"
                )
            orbit_atoms.append(tuple(rep[v] for v in a.vars))

    # collapse repeated-variable relation atoms and prune unary projections
    sig_seen = set()
    atoms2 = []
    for vs, R in rel_atoms:
        key = (vs, id(R))
        if key in sig_seen:
            continue
        sig_seen.add(key)
        atoms2.append((vs, R))

    free_reps = []  # distinct representatives of free variables, in order
    for v in f.free_vars:
        if rep[v] not in free_reps:
            free_reps.append(rep[v])
    bound_reps = [v for v in rep_vars if v not in free_reps]

    # exact elimination of bound variables with at most two neighbours over
    # binary atoms (join-project); solves chain- and tree-shaped parts
    # outright, which the long link-chain formulas rely on
    if not orbit_atoms:
        progress = True
        while progress:
            progress = False
            for v in list(bound_reps):
                touching = [(vs, R) for vs, R in atoms2 if v in vs]
                if any(len(vs) != 2 for vs, _ in touching):
                    continue
                for vs, R in [a for a in touching if set(a[0]) == {v}]:
                    domains[v] &= {t[0] for t in R.tuples if t[0] == t[1]}
                binames = [a for a in touching if set(a[0]) != {v}]
                nbrs = sorted({u for vs, _ in binames for u in vs if u != v},
                              key=f.all_vars.index)
                if len(nbrs) > 2:
                    continue

                def v_ok(val, partial):
                    for vs, R in binames:
                        t = tuple(val if u == v else partial[u] for u in vs)
                        if t not in R:
                            return False
                    return True

                if len(nbrs) == 0:
                    if not domains[v]:
                        return Relation(len(f.free_vars), frozenset())
                elif len(nbrs) == 1:
                    u = nbrs[0]
                    keep = set()
                    for b in domains[u]:
                        bud.tick()
                        if any(v_ok(c, {u: b}) for c in domains[v]):
                            keep.add(b)
                    domains[u] = keep
                else:
                    u, w = nbrs
                    pairs = set()
                    for b in domains[u]:
                        for e2 in domains[w]:
                            bud.tick()
                            if any(v_ok(c, {u: b, w: e2}) for c in domains[v]):
                                pairs.add((b, e2))
                    atoms2.append(((u, w), Relation(2, frozenset(pairs))))
                atoms2 = [a for a in atoms2 if v not in a[0]]
                bound_reps.remove(v)
                rep_vars = [x for x in rep_vars if x != v]
                progress = True
        if any(not domains[v] for v in rep_vars):
            return Relation(len(f.free_vars), frozenset())
        # absorb derived unary-like binary atoms into domains
        for vs, R in atoms2:
            if len(vs) == 2 and vs[0] == vs[1]:
                domains[vs[0]] &= {t[0] for t in R.tuples if t[0] == t[1]}

    # orbit atoms: enumerate group elements, pinning their variables
    def orbit_assignments(idx, pinned):
        if idx == len(orbit_atoms):
            yield pinned
            return
        vs = orbit_atoms[idx]
        for g in env.group.elements:
            bud.tick()
            ok = True
            add = {}
            for pos, v in enumerate(vs):
                val = g[pos]
                if v in pinned and pinned[v] != val:
                    ok = False
                    break
                if v in add and add[v] != val:
                    ok = False
                    break
                if val not in domains[v]:
                    ok = False
                    break
                add[v] = val
            if ok:
                merged = dict(pinned)
                merged.update(add)
                yield from orbit_assignments(idx + 1, merged)

    # index relation atoms by variable for forward checking
    atoms_by_var = {v: [] for v in rep_vars}
    for ai, (vs, R) in enumerate(atoms2):
        for v in set(vs):
            atoms_by_var[v].append((ai, vs, R))

    def consistent(assign):
        for vs, R in atoms2:
            if all(v in assign for v in vs):
                if tuple(assign[v] for v in vs) not in R:
                    return False
        return True

    memo_ok = {}

    def atom_ok_partial(ai, vs, R, assign):
        # does some tuple of R match the currently assigned coordinates?
        cols = tuple((i, assign[v]) for i, v in enumerate(vs) if v in assign)
        if len(cols) == len(vs):
            return tuple(assign[v] for v in vs) in R
        key = (ai, cols)
        hit = memo_ok.get(key)
        if hit is None:
            hit = any(all(t[i] == val for i, val in cols) for t in R.tuples)
            memo_ok[key] = hit
        return hit

    def bound_sat(assign):
        """Does some extension over bound_reps satisfy all atoms?"""
        todo = [v for v in bound_reps if v not in assign]
        if not todo:
            return consistent(assign)

        # verify already-assigned atoms once
        for ai, (vs, R) in enumerate(atoms2):
            if not atom_ok_partial(ai, vs, R, assign):
                return False

        cur = {v: set(domains[v]) for v in todo}

        def prune_after(v, assign, removed):
            """Forward check the atoms touching v; narrow the domain of any
            variable that is now the sole unassigned one in its atom."""
            for ai, vs, R in atoms_by_var[v]:
                un = [u for u in set(vs) if u not in assign]
                if len(un) == 1 and un[0] in cur:
                    u = un[0]
                    allowed = set()
                    for t in R.tuples:
                        if all(
                            t[i] == assign[w]
                            for i, w in enumerate(vs)
                            if w != u
                        ):
                            for i, w in enumerate(vs):
                                if w == u:
                                    allowed.add(t[i])
                    bud.tick()
                    drop = cur[u] - allowed
                    if drop:
                        cur[u] -= drop
                        removed.append((u, drop))
                        if not cur[u]:
                            return False
                elif not un:
                    if tuple(assign[w] for w in vs) not in R:
                        return False
                else:
                    if not atom_ok_partial(ai, vs, R, assign):
                        return False
            return True

        def rec(avail, assign):
            bud.tick()
            if not avail:
                return True
            v = min(
                avail,
                key=lambda u: (len(cur[u]), -len(atoms_by_var[u]), f.all_vars.index(u)),
            )
            rest = [u for u in avail if u != v]
            for val in sorted(cur[v]):
                assign[v] = val
                removed = []
                if prune_after(v, assign, removed) and rec(rest, assign):
                    del assign[v]
                    for u, drop in removed:
                        cur[u] |= drop
                    return True
                del assign[v]
                for u, drop in removed:
                    cur[u] |= drop
            return False

        # seed pruning from the variables assigned so far
        sink = []
        for v in list(assign):
            if v in atoms_by_var and not prune_after(v, assign, sink):
                return False
        return rec(todo, dict(assign))

    results = set()
    if any(not domains[v] for v in rep_vars):
        return Relation(len(f.free_vars), frozenset())

    for pinned in orbit_assignments(0, {}):
        doms = {v: (domains[v] if v not in pinned else {pinned[v]}) for v in rep_vars}

        # ground-bound fast path: once the orbit pins every bound variable,
        # iterate the tuples of one atom covering the frees instead of the
        # whole free product space
        if all(v in pinned or v in free_reps for v in rep_vars):
            target = [v for v in free_reps if v not in pinned]
            cover = None
            for vs, R in sorted(atoms2, key=lambda a: len(a[1].tuples)):
                if set(target) <= set(vs):
                    cover = (vs, R)
                    break
            if cover is not None:
                vs, R = cover
                for t in R.tuples:
                    bud.tick()
                    assign = dict(pinned)
                    ok = True
                    for pos, v in enumerate(vs):
                        val = t[pos]
                        if (v in assign and assign[v] != val) or val not in doms[v]:
                            ok = False
                            break
                        assign[v] = val
                    if ok and consistent(assign):
                        results.add(tuple(assign[rep[v]] for v in f.free_vars))
                continue

        def free_loop(i, assign):
            bud.tick()
            if i == len(free_reps):
                if bound_sat(assign):
                    results.add(tuple(assign[rep[v]] for v in f.free_vars))
                return
            v = free_reps[i]
            for val in sorted(doms[v]):
                assign[v] = val
                if all(
                    atom_ok_partial(ai, vs, R, assign)
                    for ai, vs, R in atoms_by_var[v]
                ):
                    free_loop(i + 1, assign)
                del assign[v]

        saved = domains
        try:
            domains = doms
            free_loop(0, dict())
        finally:
            domains = saved

    return Relation(len(f.free_vars), frozenset(results))


def evaluate_by_enumeration(f: RPPFormula, env: EvalEnv) -> Relation:
    """Brute-force oracle: try every assignment of all variables."""
    n = env.domain_size
    names = list(f.all_vars)
    out = set()

    def sat(assign):
        for a in f.atoms:
            if a.kind == EQ:
                if assign[a.vars[0]] != assign[a.vars[1]]:
                    return False
            elif a.kind == PARAM:
                if assign[a.vars[0]] != a.value:
                    return False
            elif a.kind == REL:
                if a.name not in env.relations:
                    raise UnknownRelation(a.name)
                if tuple(assign[v] for v in a.vars) not in env.relations[a.name]:
                    return False
            else:
                t = tuple(assign[v] for v in a.vars)
                if t not in OrbitRelationO(env.group):
                    return False
        return True

    import itertools

    for vals in itertools.product(range(n), repeat=len(names)):
        assign = dict(zip(names, vals))
        if sat(assign):
            out.add(tuple(assign[v] for v in f.free_vars))
    return Relation(len(f.free_vars), frozenset(out))


# ---------------------------------------------------------------------------
# ranking validation


def validate_ranking(f: RPPFormula, declared: Mapping[str, Sequence[int]], world_size: int = None):
    """Check that each atom's variable ranks are a constant shift of the
    declared ranking of its relation.

    declared maps relation name -> base ranking tuple.  Equality atoms need
    equal ranks; orbit atoms need all-equal ranks; parameters are one-element
    unaries and fit any rank.  Raises PreconditionError describing the first
    violating atom.
    """
    for idx, a in enumerate(f.atoms):
        if a.kind == EQ:
            r0, r1 = f.rank(a.vars[0]), f.rank(a.vars[1])
            if r0 != r1:
                raise PreconditionError(
                    f"atom {idx}: equality between ranks {r0} and {r1}"
                )
        elif a.kind == ORBIT:
            rs = {f.rank(v) for v in a.vars}
            if len(rs) > 1:
                raise PreconditionError(
                    f"atom {idx}: orbit atom spans ranks {sorted(rs)}"
                )
        elif a.kind == REL:
            if a.name not in declared:
                raise PreconditionError(f"atom {idx}: no declared ranking for {a.name!r}")
            base = declared[a.name]
            if len(base) != len(a.vars):
                raise PreconditionError(
                    f"atom {idx}: ranking arity mismatch for {a.name!r}"
                )
            shifts = {f.rank(v) - b for v, b in zip(a.vars, base)}
            if len(shifts) > 1:
                raise PreconditionError(
                    f"atom {idx}: {a.name} used at inconsistent shifts {sorted(shifts)}"
                )


# ---------------------------------------------------------------------------
# translation to the plain world


def rpp_to_pp(f: RPPFormula, g: Sequence[int], relations: Mapping[str, Relation],
              edge_names=("E",), base_rankings: Mapping[str, Sequence[int]] = None,
              group=None, edge_rename: Mapping[str, str] = None):
    """Translate a ranked formula over the g-twisted world to a plain one.

    Every variable at rank r comes to stand for g^(-r) of its old value.
    Edge atoms survive verbatim (g is an automorphism of the base edge
    relation; callers verify), optionally renamed via ``edge_rename``.  An
    atom of a relation R with base ranking b used at uniform shift c becomes
    an atom of the transported relation named 'R@c' (pointwise g^(-c) image
    of ``relations[R]``), '@0' omitted.  For a nonzero base ranking the entry
    in ``relations`` must already be the translated relation, i.e. the
    per-coordinate g^(-b_i) image of the ranked original.  Parameters move
    to g^(-r)(a).  Orbit atoms survive verbatim when ``group`` is None or
    nontrivial (g must then normalize it; callers verify); over a trivial
    group they turn into parameter pins g^(-r)(i).

    Returns (plain formula, dict of transported relations to add to the
    environment).
    """
    from .relcore import perm_power, transport_relation

    base_rankings = dict(base_rankings or {})
    new_atoms = []
    extra = {}
    for a in f.atoms:
        if a.kind == EQ:
            new_atoms.append(a)
        elif a.kind == ORBIT:
            if group is not None and group.is_trivial():
                for j, v in enumerate(a.vars):
                    r = f.rank(v)
                    new_atoms.append(Atom.param(perm_power(g, -r)[j], v))
            else:
                new_atoms.append(a)
        elif a.kind == PARAM:
            r = f.rank(a.vars[0])
            val = perm_power(g, -r)[a.value]
            new_atoms.append(Atom.param(val, a.vars[0]))
        elif a.kind == REL:
            if a.name in edge_names:
                if edge_rename and a.name in edge_rename:
                    new_atoms.append(Atom.rel(edge_rename[a.name], *a.vars))
                else:
                    new_atoms.append(a)
                continue
            base = base_rankings.get(a.name, (0,) * len(a.vars))
            shifts = {f.rank(v) - b for v, b in zip(a.vars, base)}
            if len(shifts) != 1:
                raise PreconditionError(
                    f"cannot translate: {a.name} at mixed shifts {sorted(shifts)}"
                )
            c = shifts.pop()
            if c == 0:
                new_atoms.append(a)
                continue
            name = f"{a.name}@{c}"
            if name not in extra:
                if a.name not in relations:
                    raise UnknownRelation(a.name)
                extra[name] = transport_relation(relations[a.name], perm_power(g, -c))
            new_atoms.append(Atom.rel(name, *a.vars))
    out = RPPFormula(f.free_vars, f.bound_vars, tuple(new_atoms), {})
    return out, extra


# ---------------------------------------------------------------------------
# stock formulas


def power_chain_atoms(x: str, y: str, k: int, prefix: str, edge: str = "E"):
    """Atoms and intermediate vars for x ->^k y (fresh vars share prefix)."""
    if k < 1:
        raise PreconditionError("edge power must be >= 1")
    vs = [x] + [f"{prefix}{i}" for i in range(1, k)] + [y]
    atoms = [Atom.rel(edge, vs[i], vs[i + 1]) for i in range(k)]
    return atoms, vs[1:-1]


def make_link_formulas(k: int, n_links: int, edge: str = "E"):
    """(link, closure): link joins x,y with a common ->^k successor;
    closure chains n_links links.  Ranked over the (0,1) edge: sources sit
    at rank 0, targets of a k-walk at rank k."""
    atoms, mids = power_chain_atoms("x", "w", k, "lp_", edge)
    atoms2, mids2 = power_chain_atoms("y", "w", k, "lq_", edge)
    ranks = {}
    for i, v in enumerate(mids, start=1):
        ranks[v] = i
    for i, v in enumerate(mids2, start=1):
        ranks[v] = i
    ranks["w"] = k
    link = make_formula(("x", "y"), tuple(mids + ["w"] + mids2), atoms + atoms2, ranks)

    # closure: x0 ->^k w1 <-^k z1 ->^k w2 <-^k z2 ... <-^k z_{n_links}
    free = ("x0", f"z{n_links}")
    bound = []
    atoms = []
    ranks = {"x0": 0, f"z{n_links}": 0}
    prev = "x0"
    for i in range(1, n_links + 1):
        w = f"w{i}"
        z = f"z{i}"
        a1, m1 = power_chain_atoms(prev, w, k, f"cf{i}_", edge)
        a2, m2 = power_chain_atoms(z, w, k, f"cb{i}_", edge)
        atoms.extend(a1)
        atoms.extend(a2)
        bound.extend(m1)
        bound.append(w)
        bound.extend(m2)
        if i < n_links:
            bound.append(z)
        for j, v in enumerate(m1, start=1):
            ranks[v] = j
        for j, v in enumerate(m2, start=1):
            ranks[v] = j
        ranks[w] = k
        ranks[z] = 0
        prev = z
    closure = make_formula(free, tuple(bound), atoms, ranks)
    return link, closure
