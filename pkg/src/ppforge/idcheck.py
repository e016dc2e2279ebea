"""Equational conditions and polymorphism searches over finite structures.

A condition is a finite set of function symbols plus formal identities
between terms; satisfaction means interpreting every symbol as a
polymorphism of the structure so that each identity holds pointwise.
Arity-one symbols that only decorate other symbols (outer wrappers or
twists applied directly to variables) range over the endomorphism monoid
instead of being searched; on a core that monoid is the automorphism
group, so the usual reading of pseudo conditions is recovered.

The search works on an indicator instance: one variable per argument
tuple of each searched symbol, forced equalities merged up front, unary
and binary twist constraints from the identities, and relation
constraints discovered by a closure walk from the identity cells.  Cells
the walk never reaches are filled with a projection, which satisfies
every lifted relation constraint, so restricting the search to the
closure loses nothing.

Every verdict is re-checked before being returned: identities pointwise
over all argument tuples, tables against every relation.  Searches are
single-threaded and deterministic; run independent checks in separate
processes if you want parallelism.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

from . import dianalysis
from .errors import (
    BudgetExceeded,
    InternalCheckError,
    PreconditionError,
)
from .relcore import (
    Digraph,
    PermGroup,
    Relation,
    Structure,
    _hom_search,
    endomorphisms,
)

SATISFIED = "SATISFIED"
UNSATISFIED = "UNSATISFIED"
BUDGET = "BUDGET"

# default backtracking-node allowance for one find_polymorphisms call
DEFAULT_SEARCH_BUDGET = 200_000

# hard caps on materialized instance size, independent of the node budget
_CELL_CAP = 400_000
_INSTANCE_CAP = 60_000_000

_VAR_NAMES = ("x", "y", "z")


def _var_name(i: int) -> str:
    return _VAR_NAMES[i] if i < 3 else f"x{i}"


# ---------------------------------------------------------------------------
# terms and conditions


@dataclass(frozen=True)
class Term:
    """A variable or an application of a function symbol to subterms."""

    symbol: str = None
    args: tuple = ()
    var: str = None

    @staticmethod
    def v(name: str) -> "Term":
        return Term(var=str(name))

    @staticmethod
    def app(symbol: str, *args) -> "Term":
        return Term(symbol=str(symbol), args=tuple(args))

    @property
    def is_var(self) -> bool:
        return self.var is not None

    def variables(self) -> frozenset:
        if self.is_var:
            return frozenset((self.var,))
        out = frozenset()
        for a in self.args:
            out |= a.variables()
        return out

    def symbol_count(self) -> int:
        if self.is_var:
            return 0
        return 1 + sum(a.symbol_count() for a in self.args)

    def subterms(self):
        yield self
        if not self.is_var:
            for a in self.args:
                yield from a.subterms()

    def __str__(self) -> str:
        if self.is_var:
            return self.var
        return f"{self.symbol}({','.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Condition:
    """Function symbols with arities plus identities between terms.

    The flags are computed from the syntax.  minor: each side of each
    identity applies exactly one function symbol to variables.  balanced:
    both sides of each identity use the same variable set.  idempotent:
    substituting a single variable everywhere lets congruence closure of
    the identities collapse every t(x,...,x) to x; this is a syntactic
    test, exact on all the condition kinds built here.
    """

    name: str
    symbols: tuple  # ((symbol, arity), ...) in declaration order
    identities: tuple  # ((lhs, rhs), ...)

    def __post_init__(self):
        seen = {}
        for sym, ar in self.symbols:
            if not isinstance(sym, str) or sym in seen:
                raise PreconditionError(f"bad or repeated symbol {sym!r}")
            if int(ar) < 1:
                raise PreconditionError(f"symbol {sym} must have arity >= 1")
            seen[sym] = int(ar)
        for lhs, rhs in self.identities:
            for side in (lhs, rhs):
                self._check_term(side, seen)

    @staticmethod
    def _check_term(t: Term, arities: dict) -> None:
        if t.is_var:
            return
        if t.symbol not in arities:
            raise PreconditionError(f"undeclared symbol {t.symbol!r}")
        if len(t.args) != arities[t.symbol]:
            raise PreconditionError(
                f"{t.symbol} used with {len(t.args)} arguments, arity is {arities[t.symbol]}"
            )
        for a in t.args:
            Condition._check_term(a, arities)

    @property
    def function_symbols(self) -> dict:
        return dict(self.symbols)

    def arity(self, symbol: str) -> int:
        return self.function_symbols[symbol]

    @property
    def minor(self) -> bool:
        return all(
            lhs.symbol_count() == 1 and rhs.symbol_count() == 1
            for lhs, rhs in self.identities
        )

    @property
    def balanced(self) -> bool:
        return all(lhs.variables() == rhs.variables() for lhs, rhs in self.identities)

    @property
    def idempotent(self) -> bool:
        return _idempotent_flag(self)

    def __str__(self) -> str:
        ids = "; ".join(f"{l} = {r}" for l, r in self.identities)
        return f"{self.name}: {ids}"


def _diagonal(t: Term) -> Term:
    if t.is_var:
        return Term.v("x")
    return Term.app(t.symbol, *[_diagonal(a) for a in t.args])


def _idempotent_flag(c: Condition) -> bool:
    # congruence closure over the diagonal substitution instances plus
    # the probe terms t(x,...,x); entailment is checked only inside this
    # finite universe, which suffices for the built-in kinds
    x = Term.v("x")
    universe = {x}
    pairs = []
    for lhs, rhs in c.identities:
        dl, dr = _diagonal(lhs), _diagonal(rhs)
        pairs.append((dl, dr))
        universe.update(dl.subterms())
        universe.update(dr.subterms())
    probes = {}
    for sym, ar in c.symbols:
        p = Term.app(sym, *([x] * ar))
        probes[sym] = p
        universe.update(p.subterms())
    parent = {t: t for t in universe}

    def find(t):
        while parent[t] is not t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra is not rb:
            parent[ra] = rb
            return True
        return False

    for a, b in pairs:
        union(a, b)
    apps = [t for t in universe if not t.is_var]
    changed = True
    while changed:
        changed = False
        for i, s in enumerate(apps):
            for t in apps[i + 1 :]:
                if s.symbol != t.symbol or find(s) is find(t):
                    continue
                if all(find(a) is find(b) for a, b in zip(s.args, t.args)):
                    union(s, t)
                    changed = True
    return all(find(p) is find(x) for p in probes.values())


def _pseudoloop_slots(b: Digraph) -> list:
    """Canonical edge-slot order: vertices ascending, the loop of u first,
    then for each u < v the slot (u, v) before (v, u)."""
    slots = []
    for u in range(b.domain_size):
        if (u, u) in b.edges:
            slots.append((u, u))
        for v in range(u + 1, b.domain_size):
            if (u, v) in b.edges:
                slots.append((u, v))
            if (v, u) in b.edges:
                slots.append((v, u))
    return slots


def make_condition(kind: str, param=None) -> Condition:
    """Build one of the standard condition families.

    wnu:n            chain of near-unanimity style minor identities, n >= 3
    idempotent_wnu:n same plus w(x,...,x) = x
    siggers          the six-variable interchange identity
    pseudo_siggers   the same identity under two outer unary symbols
    pseudo_wnu:n     the wnu chain with one outer unary symbol per pattern
    pseudoloop:B     param is a Digraph; one slot per directed edge of B,
                     sources on the left, targets on the right
    ugly:m           one identity with m unary-twisted slots prefixed to
                     the six-variable interchange pattern, m >= 1
    """
    x, y, z = Term.v("x"), Term.v("y"), Term.v("z")

    def wnu_patterns(n):
        pats = []
        for pos in range(n - 1, -1, -1):
            args = [x] * n
            args[pos] = y
            pats.append(args)
        return pats

    if kind in ("wnu", "idempotent_wnu", "pseudo_wnu"):
        if not isinstance(param, int) or param < 3:
            raise PreconditionError(f"{kind} needs an integer arity >= 3")
        n = param
        pats = wnu_patterns(n)
        if kind == "pseudo_wnu":
            symbols = [("w", n)] + [(f"u{i + 1}", 1) for i in range(n)]
            sides = [Term.app(f"u{i + 1}", Term.app("w", *pats[i])) for i in range(n)]
        else:
            symbols = [("w", n)]
            sides = [Term.app("w", *p) for p in pats]
        identities = [(sides[i], sides[i + 1]) for i in range(len(sides) - 1)]
        if kind == "idempotent_wnu":
            identities.append((Term.app("w", *([x] * n)), x))
        return Condition(f"{kind}:{n}", tuple(symbols), tuple(identities))

    if kind == "siggers":
        if param is not None:
            raise PreconditionError("siggers takes no parameter")
        lhs = Term.app("s", x, y, x, z, y, z)
        rhs = Term.app("s", y, x, z, x, z, y)
        return Condition("siggers", (("s", 6),), ((lhs, rhs),))

    if kind == "pseudo_siggers":
        if param is not None:
            raise PreconditionError("pseudo_siggers takes no parameter")
        lhs = Term.app("u", Term.app("s", x, y, x, z, y, z))
        rhs = Term.app("v", Term.app("s", y, x, z, x, z, y))
        return Condition(
            "pseudo_siggers", (("s", 6), ("u", 1), ("v", 1)), ((lhs, rhs),)
        )

    if kind == "pseudoloop":
        if not isinstance(param, Digraph):
            raise PreconditionError("pseudoloop needs a Digraph parameter")
        slots = _pseudoloop_slots(param)
        if not slots:
            raise PreconditionError("pseudoloop needs a digraph with at least one edge")
        m = len(slots)
        vs = [Term.v(_var_name(i)) for i in range(param.domain_size)]
        lhs = Term.app("u", Term.app("s", *[vs[a] for a, _ in slots]))
        rhs = Term.app("v", Term.app("s", *[vs[b] for _, b in slots]))
        name = f"pseudoloop:{param.domain_size}v{m}e"
        return Condition(name, (("s", m), ("u", 1), ("v", 1)), ((lhs, rhs),))

    if kind == "ugly":
        if not isinstance(param, int) or param < 1:
            raise PreconditionError("ugly needs an integer m >= 1")
        m = param
        symbols = [("h", m + 6)] + [(f"a{i + 1}", 1) for i in range(m)]
        lhs = Term.app(
            "h", *[Term.app(f"a{i + 1}", x) for i in range(m)], x, y, x, z, y, z
        )
        rhs = Term.app("h", *([y] * m), y, x, z, x, z, y)
        return Condition(f"ugly:{m}", tuple(symbols), ((lhs, rhs),))

    raise PreconditionError(f"unknown condition kind {kind!r}")


def is_trivial(c: Condition) -> bool:
    """Whether the condition is satisfied by projections alone.

    Every symbol is sent to one of its coordinate projections (for arity
    one that is the identity) and each term then reduces to a single
    variable; the condition is trivial exactly when some choice of
    coordinates makes both sides of every identity reduce to the same
    variable.
    """
    syms = [sym for sym, _ in c.symbols]
    choices = [range(ar) for _, ar in c.symbols]

    def reduce(t: Term, pick: dict) -> str:
        while not t.is_var:
            t = t.args[pick[t.symbol]]
        return t.var

    for combo in itertools.product(*choices):
        pick = dict(zip(syms, combo))
        if all(reduce(l, pick) == reduce(r, pick) for l, r in c.identities):
            return True
    return False


# ---------------------------------------------------------------------------
# operation tables


class OperationTable:
    """A finitary operation on range(n), stored as a base projection plus
    the cells where the operation deviates from it."""

    __slots__ = ("arity", "domain_size", "base_coord", "overrides")

    def __init__(self, arity: int, domain_size: int, base_coord: int = 0, overrides=None):
        if not 0 <= base_coord < arity:
            raise PreconditionError("base coordinate out of range")
        self.arity = int(arity)
        self.domain_size = int(domain_size)
        self.base_coord = int(base_coord)
        cleaned = {}
        for args, val in (overrides or {}).items():
            args = tuple(int(a) for a in args)
            val = int(val)
            if len(args) != arity:
                raise PreconditionError(f"override {args} has wrong length")
            if not all(0 <= a < domain_size for a in args) or not 0 <= val < domain_size:
                raise PreconditionError(f"override {args} -> {val} out of range")
            if val != args[base_coord]:
                cleaned[args] = val
        self.overrides = cleaned

    @staticmethod
    def from_function(arity: int, domain_size: int, fn) -> "OperationTable":
        over = {}
        for args in itertools.product(range(domain_size), repeat=arity):
            over[args] = fn(*args)
        return OperationTable(arity, domain_size, 0, over)

    @staticmethod
    def from_unary_map(mapping) -> "OperationTable":
        n = len(mapping)
        return OperationTable(1, n, 0, {(a,): mapping[a] for a in range(n)})

    def value(self, args) -> int:
        args = tuple(args)
        got = self.overrides.get(args)
        return args[self.base_coord] if got is None else got

    def __call__(self, *args) -> int:
        return self.value(args)

    def unary_map(self) -> tuple:
        if self.arity != 1:
            raise PreconditionError("unary_map needs an arity-1 table")
        return tuple(self.value((a,)) for a in range(self.domain_size))

    def is_projection(self) -> bool:
        return not self.overrides

    def as_dict(self) -> dict:
        return {
            "arity": self.arity,
            "domain_size": self.domain_size,
            "base_coord": self.base_coord,
            "overrides": [[list(k), v] for k, v in sorted(self.overrides.items())],
        }

    @staticmethod
    def from_dict(d: dict) -> "OperationTable":
        over = {tuple(k): v for k, v in d.get("overrides", [])}
        return OperationTable(d["arity"], d["domain_size"], d.get("base_coord", 0), over)

    def __eq__(self, other):
        if not isinstance(other, OperationTable):
            return NotImplemented
        if (self.arity, self.domain_size) != (other.arity, other.domain_size):
            return False
        if self.base_coord == other.base_coord:
            return self.overrides == other.overrides
        keys = set(self.overrides) | set(other.overrides)
        return all(self.value(k) == other.value(k) for k in keys)

    def __repr__(self):
        return (
            f"OperationTable(arity={self.arity}, n={self.domain_size}, "
            f"base={self.base_coord}, deviations={len(self.overrides)})"
        )


def evaluate_term(t: Term, env: dict, tables: dict) -> int:
    """Evaluate a term under a variable environment and symbol tables."""
    if t.is_var:
        return env[t.var]
    vals = tuple(evaluate_term(a, env, tables) for a in t.args)
    return tables[t.symbol].value(vals)


def check_tables(s: Structure, c: Condition, tables: dict, budget: int = None) -> list:
    """Re-verify a solution; returns a list of violation strings.

    Identities are checked pointwise over every argument assignment.
    Preservation is checked exactly: a constraint instance built from
    relation tuples can only fail if it touches a cell where the table
    deviates from its base projection (an all-projection instance
    reproduces one of the tuples), so it is enough to enumerate the
    instances through each deviating cell.
    """
    n = s.domain_size
    cap = budget if budget is not None else 10_000_000
    violations = []
    arities = c.function_symbols
    for sym, ar in arities.items():
        tab = tables.get(sym)
        if tab is None:
            violations.append(f"missing table for {sym}")
            continue
        if tab.arity != ar or tab.domain_size != n:
            violations.append(f"table for {sym} has wrong shape")
    if violations:
        return violations

    for lhs, rhs in c.identities:
        vs = sorted(lhs.variables() | rhs.variables())
        bad = None
        for assignment in itertools.product(range(n), repeat=len(vs)):
            env = dict(zip(vs, assignment))
            if evaluate_term(lhs, env, tables) != evaluate_term(rhs, env, tables):
                bad = env
                break
        if bad is not None:
            violations.append(f"identity {lhs} = {rhs} fails at {bad}")

    # an instance can be rediscovered from each of its deviating cells;
    # rechecking is harmless and cheaper than deduplicating
    work = 0
    for sym in sorted(arities):
        tab = tables[sym]
        k = tab.arity
        ov = tab.overrides
        bc = tab.base_coord
        for rname in sorted(s.relations):
            rel = s.relations[rname]
            tuples = rel.sorted()
            if not tuples:
                continue
            bad = None
            if rel.arity == 2:
                succ = {}
                pred = {}
                for a, b in tuples:
                    succ.setdefault(a, []).append(b)
                    pred.setdefault(b, []).append(a)
                relset = rel.tuples
                for cell in sorted(ov):
                    val = ov[cell]
                    for nbr, forward in ((succ, True), (pred, False)):
                        lists = [nbr.get(v) for v in cell]
                        if any(l is None for l in lists):
                            continue
                        for w in itertools.product(*lists):
                            work += 1
                            if work > cap:
                                raise BudgetExceeded(
                                    "table verification budget exhausted"
                                )
                            wv = ov.get(w, w[bc])
                            pair = (val, wv) if forward else (wv, val)
                            if pair not in relset:
                                bad = (cell, w, pair)
                                break
                        if bad:
                            break
                    if bad:
                        break
                if bad:
                    violations.append(
                        f"table {sym} does not preserve {rname}: "
                        f"cells {bad[0]} and {bad[1]} give {bad[2]}"
                    )
                continue
            by_pv = [{} for _ in range(rel.arity)]
            for t in tuples:
                for i, v in enumerate(t):
                    by_pv[i].setdefault(v, []).append(t)
            for cell in sorted(ov):
                for i in range(rel.arity):
                    lists = [by_pv[i].get(cell[j]) for j in range(k)]
                    if any(l is None for l in lists):
                        continue
                    for inst in itertools.product(*lists):
                        work += 1
                        if work > cap:
                            raise BudgetExceeded("table verification budget exhausted")
                        out = []
                        for p in range(rel.arity):
                            a = tuple(t[p] for t in inst)
                            out.append(ov.get(a, a[bc]))
                        if tuple(out) not in rel:
                            bad = (inst, tuple(out))
                            break
                    if bad:
                        break
                if bad:
                    break
            if bad:
                violations.append(
                    f"table {sym} does not preserve {rname}: rows {bad[0]} give {bad[1]}"
                )
    return violations


# ---------------------------------------------------------------------------
# identity shapes

# a side is ("var", name) or ("app", outer_symbol_or_None, main_symbol, args)
# where each arg is ("var", name) or ("twist", unary_symbol, name)


def _classify_side(t: Term, arities: dict):
    if t.is_var:
        return ("var", t.var)
    outer = None
    body = t
    if arities[t.symbol] == 1 and len(t.args) == 1 and not t.args[0].is_var:
        outer = t.symbol
        body = t.args[0]
    if body.is_var:
        raise PreconditionError("unsupported identity shape")
    args = []
    for a in body.args:
        if a.is_var:
            args.append(("var", a.var))
        elif arities[a.symbol] == 1 and len(a.args) == 1 and a.args[0].is_var:
            args.append(("twist", a.symbol, a.args[0].var))
        else:
            raise PreconditionError(
                "nested applications are not supported in identities"
            )
    return ("app", outer, body.symbol, tuple(args))


def _condition_shapes(c: Condition):
    """Classified identity sides, searched symbols, ranging unary symbols."""
    arities = c.function_symbols
    shapes = []
    ranging = set()
    mains = set()
    for lhs, rhs in c.identities:
        sl, sr = _classify_side(lhs, arities), _classify_side(rhs, arities)
        shapes.append((sl, sr))
        for side in (sl, sr):
            if side[0] != "app":
                continue
            _, outer, main, args = side
            mains.add(main)
            if outer is not None:
                ranging.add(outer)
            for a in args:
                if a[0] == "twist":
                    ranging.add(a[1])
    if ranging & mains:
        raise PreconditionError(
            "a unary symbol cannot both decorate and be a searched symbol"
        )
    for sym, _ in c.symbols:
        if sym not in ranging and sym not in mains:
            mains.add(sym)  # declared but unused: searched, unconstrained
    return shapes, sorted(mains), sorted(ranging)


# ---------------------------------------------------------------------------
# the indicator search


class _Budget(Exception):
    pass


class _RelIndex:
    __slots__ = ("name", "arity", "tuples", "by_pv", "succ", "pred", "succ_list", "pred_list")

    def __init__(self, name: str, rel: Relation):
        self.name = name
        self.arity = rel.arity
        self.tuples = rel.sorted()
        self.by_pv = [{} for _ in range(rel.arity)]
        for t in self.tuples:
            for i, v in enumerate(t):
                self.by_pv[i].setdefault(v, []).append(t)
        if rel.arity == 2:
            self.succ = {}
            self.pred = {}
            for a, b in self.tuples:
                self.succ.setdefault(a, set()).add(b)
                self.pred.setdefault(b, set()).add(a)
            self.succ_list = {v: tuple(sorted(ws)) for v, ws in self.succ.items()}
            self.pred_list = {v: tuple(sorted(ws)) for v, ws in self.pred.items()}
        else:
            self.succ = self.pred = None
            self.succ_list = self.pred_list = None


class _DSU:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        p = self.parent
        if x not in p:
            p[x] = x
            return x
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _identity_constraints(shapes, n, unary_maps):
    """Ground the classified identities over all variable assignments.

    Returns (feasible, merges, pins, links) where merges are cell pairs
    forced equal, pins map cells to allowed value sets, and links are
    (cellA, cellB, pairset) twist constraints.  A cell is (symbol, args).
    """
    merges = []
    pins = {}
    links = []

    def add_pin(cell, allowed):
        cur = pins.get(cell)
        pins[cell] = allowed if cur is None else (cur & allowed)

    pairsets = {}

    def pairset(um_l, um_r):
        key = (um_l, um_r)
        got = pairsets.get(key)
        if got is None:
            got = frozenset(
                (a, b) for a in range(n) for b in range(n) if um_l[a] == um_r[b]
            )
            pairsets[key] = got
        return got

    ident = tuple(range(n))

    def outer_map(outer):
        return ident if outer is None else unary_maps[outer]

    for sl, sr in shapes:
        vs = sorted(
            {a[-1] for s in (sl, sr) if s[0] == "app" for a in s[3]}
            | {s[1] for s in (sl, sr) if s[0] == "var"}
        )
        for assignment in itertools.product(range(n), repeat=len(vs)):
            env = dict(zip(vs, assignment))

            def ground(side):
                if side[0] == "var":
                    return ("const", env[side[1]])
                _, outer, main, args = side
                tup = tuple(
                    env[a[1]] if a[0] == "var" else unary_maps[a[1]][env[a[2]]]
                    for a in args
                )
                return ("cell", (main, tup), outer_map(outer))

            gl, gr = ground(sl), ground(sr)
            if gl[0] == "const" and gr[0] == "const":
                if gl[1] != gr[1]:
                    return False, merges, pins, links
                continue
            if gl[0] == "const" or gr[0] == "const":
                if gl[0] == "const":
                    gl, gr = gr, gl
                _, cell, um = gl
                target = gr[1]
                add_pin(cell, frozenset(a for a in range(n) if um[a] == target))
                continue
            _, cell_l, um_l = gl
            _, cell_r, um_r = gr
            if cell_l == cell_r:
                if um_l != um_r:
                    add_pin(
                        cell_l, frozenset(a for a in range(n) if um_l[a] == um_r[a])
                    )
                continue
            if um_l == um_r and len(set(um_l)) == n:
                merges.append((cell_l, cell_r))
            else:
                links.append((cell_l, cell_r, pairset(um_l, um_r)))
    return True, merges, pins, links


class _Indicator:
    """One grounded indicator instance over the closure of the seed cells."""

    def __init__(self, s: Structure, merges, pins, links, caps):
        self.n = s.domain_size
        self.rels = [_RelIndex(name, s.relations[name]) for name in sorted(s.relations)]
        cell_cap, inst_cap = caps

        dsu = _DSU()
        seeds = []
        seen = set()

        def see(cell):
            if cell not in seen:
                seen.add(cell)
                seeds.append(cell)

        for a, b in merges:
            see(a)
            see(b)
            dsu.union(a, b)
        for cell in pins:
            see(cell)
        for a, b, _ in links:
            see(a)
            see(b)

        # closure walk: any relation-constraint instance that touches a
        # known cell pulls all of its cells in
        cells = []
        index = {}
        work = 0

        def intern(cell):
            got = index.get(cell)
            if got is None:
                got = len(cells)
                index[cell] = got
                cells.append(cell)
                if got >= cell_cap:
                    raise _Budget()
            return got

        frontier = list(seeds)
        for cell in frontier:
            intern(cell)
        qi = 0
        while qi < len(frontier):
            cell = frontier[qi]
            qi += 1
            sym, tup = cell
            k = len(tup)
            for rel in self.rels:
                if rel.arity == 2:
                    # product neighbours directly; each instance through
                    # this cell is one choice of edge per coordinate
                    for nbr in (rel.succ_list, rel.pred_list):
                        lists = [nbr.get(v) for v in tup]
                        if any(l is None for l in lists):
                            continue
                        for otup in itertools.product(*lists):
                            work += 1
                            if work > inst_cap:
                                raise _Budget()
                            other = (sym, otup)
                            if other not in index:
                                intern(other)
                                frontier.append(other)
                    continue
                for i in range(rel.arity):
                    lists = [rel.by_pv[i].get(tup[j]) for j in range(k)]
                    if any(l is None for l in lists):
                        continue
                    for inst in itertools.product(*lists):
                        work += 1
                        if work > inst_cap:
                            raise _Budget()
                        for p in range(rel.arity):
                            if p == i:
                                continue
                            other = (sym, tuple(t[p] for t in inst))
                            if other not in index:
                                intern(other)
                                frontier.append(other)
        self.cells = cells
        self.cell_index = index
        self.closure_work = work

        roots = {}
        self.class_of = []
        for ci, cell in enumerate(cells):
            r = dsu.find(cell)
            cls = roots.get(r)
            if cls is None:
                cls = len(roots)
                roots[r] = cls
            self.class_of.append(cls)
        self.n_classes = len(roots)
        self.members = [[] for _ in range(self.n_classes)]
        for ci, cell in enumerate(cells):
            self.members[self.class_of[ci]].append(cell)

        full = frozenset(range(self.n))
        self.domains = [set(full) for _ in range(self.n_classes)]
        for cell, allowed in pins.items():
            self.domains[self.cls_of_cell(cell)] &= allowed
        self.twists = [[] for _ in range(self.n_classes)]
        for a, b, pairs in links:
            ca, cb = self.cls_of_cell(a), self.cls_of_cell(b)
            if ca == cb:
                self.domains[ca] &= {x for x, y in pairs if x == y}
                continue
            fwd = {}
            bwd = {}
            for x, y in pairs:
                fwd.setdefault(x, set()).add(y)
                bwd.setdefault(y, set()).add(x)
            self.twists[ca].append((cb, fwd))
            self.twists[cb].append((ca, bwd))

    def cls_of_cell(self, cell):
        return self.class_of[self.cell_index[cell]]

    def solve(self, nodes_left: list):
        """Backtracking search; returns class values or None, and mutates
        nodes_left[0].  Raises _Budget when the node allowance runs out."""
        domains = self.domains
        values = [None] * self.n_classes
        trail = []
        unassigned = [self.n_classes]

        def prune(cls, keep):
            dom = domains[cls]
            removed = dom - keep
            if not removed:
                return True, False
            dom -= removed
            trail.append((cls, removed))
            if not dom:
                return False, False
            return True, len(dom) == 1

        heap = []
        forced0 = []
        for cls in range(self.n_classes):
            if not domains[cls]:
                return None
            if len(domains[cls]) == 1:
                forced0.append(cls)
            heapq.heappush(heap, (len(domains[cls]), cls))

        def propagate(start_cls, start_val):
            queue = [(start_cls, start_val)]
            while queue:
                cls, val = queue.pop()
                if values[cls] is not None:
                    if values[cls] != val:
                        return False
                    continue
                if val not in domains[cls]:
                    return False
                values[cls] = val
                unassigned[0] -= 1
                trail.append((cls, None))
                for cell in self.members[cls]:
                    sym, tup = cell
                    k = len(tup)
                    for rel in self.rels:
                        if rel.arity == 2:
                            for nbr, allowed_map in (
                                (rel.succ_list, rel.succ),
                                (rel.pred_list, rel.pred),
                            ):
                                lists = [nbr.get(v) for v in tup]
                                if any(l is None for l in lists):
                                    continue
                                allowed = allowed_map.get(val)
                                if allowed is None:
                                    return False
                                for otup in itertools.product(*lists):
                                    ocls = self.cls_of_cell((sym, otup))
                                    if values[ocls] is not None:
                                        if values[ocls] not in allowed:
                                            return False
                                        continue
                                    ok, unit = prune(ocls, allowed)
                                    if not ok:
                                        return False
                                    if unit:
                                        queue.append((ocls, next(iter(domains[ocls]))))
                                    else:
                                        heapq.heappush(
                                            heap, (len(domains[ocls]), ocls)
                                        )
                            continue
                        for i in range(rel.arity):
                            lists = [rel.by_pv[i].get(tup[j]) for j in range(k)]
                            if any(l is None for l in lists):
                                continue
                            for inst in itertools.product(*lists):
                                oclss = [
                                    self.cls_of_cell((sym, tuple(t[p] for t in inst)))
                                    for p in range(rel.arity)
                                ]
                                fixed = {}
                                open_pos = []
                                for p, ocls in enumerate(oclss):
                                    if values[ocls] is not None:
                                        fixed[p] = values[ocls]
                                    else:
                                        open_pos.append(p)
                                allowed_per = {p: set() for p in open_pos}
                                any_row = False
                                for t in rel.tuples:
                                    if any(t[p] != v for p, v in fixed.items()):
                                        continue
                                    if any(
                                        t[p] not in domains[oclss[p]]
                                        for p in open_pos
                                    ):
                                        continue
                                    any_row = True
                                    for p in open_pos:
                                        allowed_per[p].add(t[p])
                                if not any_row:
                                    return False
                                for p in open_pos:
                                    ocls = oclss[p]
                                    ok, unit = prune(ocls, allowed_per[p])
                                    if not ok:
                                        return False
                                    if unit:
                                        queue.append(
                                            (ocls, next(iter(domains[ocls])))
                                        )
                for ocls, fwd in self.twists[cls]:
                    allowed = fwd.get(val)
                    if allowed is None:
                        return False
                    if values[ocls] is not None:
                        if values[ocls] not in allowed:
                            return False
                        continue
                    ok, unit = prune(ocls, allowed)
                    if not ok:
                        return False
                    if unit:
                        queue.append((ocls, next(iter(domains[ocls]))))
                    else:
                        heapq.heappush(heap, (len(domains[ocls]), ocls))
            return True

        def undo(mark):
            while len(trail) > mark:
                cls, removed = trail.pop()
                if removed is None:
                    values[cls] = None
                    unassigned[0] += 1
                else:
                    domains[cls] |= removed

        mark0 = len(trail)
        for cls in forced0:
            if values[cls] is None:
                if not propagate(cls, next(iter(domains[cls]))):
                    undo(mark0)
                    return None

        stack = []  # (cls, value_iter, trail_mark)

        def pick():
            # heap entries go stale under pruning and undo; validate on
            # pop and rebuild once the heap runs dry
            while heap:
                size, cls = heapq.heappop(heap)
                if values[cls] is None and len(domains[cls]) == size:
                    return cls
            best = None
            for cls in range(self.n_classes):
                if values[cls] is None:
                    key = (len(domains[cls]), cls)
                    if best is None or key < best:
                        best = key
            if best is None:
                return None
            for cls in range(self.n_classes):
                if values[cls] is None:
                    heapq.heappush(heap, (len(domains[cls]), cls))
            return best[1]

        while True:
            if unassigned[0] == 0:
                return list(values)
            cls = pick()
            if cls is None:
                return list(values)
            stack.append((cls, iter(sorted(domains[cls])), len(trail)))
            descended = False
            while stack and not descended:
                cur, it, mark = stack[-1]
                advanced = False
                for val in it:
                    nodes_left[0] -= 1
                    if nodes_left[0] < 0:
                        raise _Budget()
                    if propagate(cur, val):
                        advanced = True
                        break
                    undo(mark)
                if advanced:
                    descended = True
                else:
                    undo(mark)
                    stack.pop()
                    if not stack:
                        return None


def _gaifman_components(s: Structure) -> list:
    parent = list(range(s.domain_size))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for rel in s.relations.values():
        for t in rel.tuples:
            for a, b in zip(t, t[1:]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
    return [find(v) for v in range(s.domain_size)]


def _canonical_assignments(endos: list, auts: list, count: int, n: int):
    """Deterministic representatives of End(s)^count up to simultaneous
    conjugation by Aut(s); falls back to the full product when it is too
    large to filter."""
    total = len(endos) ** count
    if count == 0:
        return [()]
    if total > 200_000 or len(auts) <= 1:
        return list(itertools.product(endos, repeat=count))
    inverse = {}
    for b in auts:
        inv = [0] * n
        for i, bi in enumerate(b):
            inv[bi] = i
        inverse[b] = tuple(inv)
    out = []
    for tup in itertools.product(endos, repeat=count):
        best = tup
        for b in auts:
            binv = inverse[b]
            conj = tuple(tuple(b[u[binv[a]]] for a in range(n)) for u in tup)
            if conj < best:
                best = conj
        if best == tup:
            out.append(tup)
    return out


@dataclass(frozen=True)
class PolySearchResult:
    """Verdict of a polymorphism search.

    kind is SATISFIED, UNSATISFIED or BUDGET.  On SATISFIED the tables
    field maps every symbol of the condition, ranging unary symbols
    included, to an OperationTable.
    """

    kind: str
    tables: dict = None
    nodes: int = 0
    notes: dict = field(default_factory=dict)


def find_polymorphisms(
    s: Structure, c: Condition, budget: int = None
) -> PolySearchResult:
    """Search for polymorphisms of s satisfying the condition.

    Ranging unary symbols are enumerated over the endomorphisms of s (the
    automorphisms when s is a core), deduplicated up to simultaneous
    conjugation by automorphisms and ordered so that assignments placing
    interacting identity cells in distinct Gaifman components are tried
    first.  For each assignment the remaining symbols are searched on the
    indicator instance.  UNSATISFIED is only returned after every
    assignment's search space is exhausted; BUDGET means the node budget
    ran out or an instance grew past the materialization caps first.
    """
    if budget is None:
        budget = DEFAULT_SEARCH_BUDGET
    if budget < 1:
        raise PreconditionError("budget must be positive")
    n = s.domain_size
    shapes, mains, ranging = _condition_shapes(c)
    arities = c.function_symbols
    if not mains:
        raise PreconditionError("condition has no searched symbol")

    # trivial special case: identities between bare variables only
    if not any(side[0] == "app" for pair in shapes for side in pair):
        ok = all(sl == sr for sl, sr in shapes) or n == 1
        if not ok:
            return PolySearchResult(UNSATISFIED, notes={"reason": "variable clash"})
        tables = {sym: OperationTable(ar, n) for sym, ar in c.symbols}
        return PolySearchResult(SATISFIED, tables=tables)

    endo_list = [tuple(e) for e in endomorphisms(s)]
    auts = [e for e in endo_list if sorted(e) == list(range(n))]
    core = len(endo_list) == len(auts)

    assignments = _canonical_assignments(endo_list, auts, len(ranging), n)

    comp = _gaifman_components(s)

    def collision_score(maps):
        unary_maps = dict(zip(ranging, maps))
        score = 0
        for sl, sr in shapes:
            if sl[0] != "app" or sr[0] != "app":
                continue
            vs = sorted({a[-1] for side in (sl, sr) for a in side[3]})
            for assignment in itertools.product(range(n), repeat=len(vs)):
                env = dict(zip(vs, assignment))

                def tup_of(side):
                    return tuple(
                        env[a[1]] if a[0] == "var" else unary_maps[a[1]][env[a[2]]]
                        for a in side[3]
                    )

                tl, tr = tup_of(sl), tup_of(sr)
                if (sl[2], tl) == (sr[2], tr):
                    continue
                if tuple(comp[v] for v in tl) == tuple(comp[v] for v in tr):
                    score += 1
        return score

    if ranging and len(assignments) <= 4096:
        assignments.sort(key=lambda maps: (collision_score(maps), maps))

    # necessary condition from the all-equal assignment: when an identity
    # grounds both sides to the same cell under it, the outer maps must
    # agree somewhere on the diagonal of the searched table, and every
    # diagonal is an endomorphism
    diag_pairs = []
    for sl, sr in shapes:
        if sl[0] != "app" or sr[0] != "app" or sl[2] != sr[2]:
            continue
        if all(a[0] == "var" for a in sl[3]) and all(a[0] == "var" for a in sr[3]):
            diag_pairs.append((sl[1], sr[1]))

    def diag_feasible(unary_maps):
        ident = tuple(range(n))
        for outer_l, outer_r in diag_pairs:
            ul = ident if outer_l is None else unary_maps[outer_l]
            ur = ident if outer_r is None else unary_maps[outer_r]
            if ul == ur:
                continue
            if not any(
                all(ul[d[a]] == ur[d[a]] for a in range(n)) for d in endo_list
            ):
                return False
        return True

    caps = (_CELL_CAP, _INSTANCE_CAP)
    nodes_left = [budget]
    tried = 0
    pruned = 0
    budget_hit = False

    for maps in assignments:
        unary_maps = dict(zip(ranging, maps))
        if diag_pairs and not diag_feasible(unary_maps):
            pruned += 1
            continue
        tried += 1
        feasible, merges, pins, links = _identity_constraints(shapes, n, unary_maps)
        if not feasible:
            continue
        try:
            problem = _Indicator(s, merges, pins, links, caps)
            solution = problem.solve(nodes_left)
        except _Budget:
            budget_hit = True
            break
        if solution is None:
            continue
        tables = {}
        for sym in mains:
            k = arities[sym]
            over = {}
            for ci, cell in enumerate(problem.cells):
                if cell[0] != sym:
                    continue
                over[cell[1]] = solution[problem.class_of[ci]]
            tables[sym] = OperationTable(k, n, 0, over)
        for usym, umap in unary_maps.items():
            tables[usym] = OperationTable.from_unary_map(umap)
        bad = check_tables(s, c, tables)
        if bad:
            raise InternalCheckError(
                "search produced tables that fail re-verification: " + "; ".join(bad)
            )
        return PolySearchResult(
            SATISFIED,
            tables=tables,
            nodes=budget - nodes_left[0],
            notes={
                "condition": c.name,
                "unary_range": "automorphisms" if core else "endomorphisms",
                "assignments_tried": tried,
                "assignments_pruned": pruned,
                "cells": len(problem.cells),
            },
        )

    kind = BUDGET if budget_hit else UNSATISFIED
    return PolySearchResult(
        kind,
        nodes=budget - nodes_left[0],
        notes={
            "condition": c.name,
            "unary_range": "automorphisms" if core else "endomorphisms",
            "assignments_tried": tried,
            "assignments_pruned": pruned,
            "assignments_total": len(assignments),
        },
    )


# ---------------------------------------------------------------------------
# condition search for structures


def condition_menu(limit_ugly: int = 3) -> list:
    """The conditions tried by search_conditions, cheap witnesses first.

    The unary-twisted family comes before the loop conditions: whenever a
    structure satisfies any nontrivial condition at all, some member of
    that family is satisfied, and its instances stay small."""
    menu = [make_condition("ugly", m) for m in range(1, limit_ugly + 1)]
    k3 = Digraph(3, [(a, b) for a in range(3) for b in range(3) if a != b])
    c5 = Digraph(
        5,
        [(i, (i + 1) % 5) for i in range(5)] + [((i + 1) % 5, i) for i in range(5)],
    )
    menu.append(make_condition("pseudoloop", k3))
    menu.append(make_condition("pseudoloop", c5))
    return menu


def search_conditions(s: Structure, budget: int = None, menu: list = None):
    """Find a satisfied nontrivial non-idempotent condition for s.

    Runs through the menu in order and returns (condition, result) for
    the first SATISFIED verdict; returns (None, result) when the whole
    menu is UNSATISFIED, with result carrying the last verdict.  A BUDGET
    verdict stops the search immediately.
    """
    if menu is None:
        menu = condition_menu()
    last = None
    for c in menu:
        if is_trivial(c) or c.idempotent:
            raise PreconditionError(f"menu condition {c.name} proves nothing")
        res = find_polymorphisms(s, c, budget=budget)
        last = res
        if res.kind == SATISFIED:
            return c, res
        if res.kind == BUDGET:
            return None, res
    return None, last


def least_ugly_m(s: Structure, m_max: int = None, budget: int = None):
    """Smallest m with the m-slot twisted condition satisfied, else None.

    m_max defaults to the number of automorphisms of s, which is always
    enough when any m works."""
    if m_max is None:
        m_max = max(
            1,
            len([e for e in endomorphisms(s) if sorted(e) == list(range(s.domain_size))]),
        )
    for m in range(1, m_max + 1):
        res = find_polymorphisms(s, make_condition("ugly", m), budget=budget)
        if res.kind == SATISFIED:
            return m
        if res.kind == BUDGET:
            raise BudgetExceeded(f"budget ran out at m={m}")
    return None


# ---------------------------------------------------------------------------
# the digraph of ternary operations


@dataclass(frozen=True)
class TernaryOpDigraph:
    """Digraph on the ternary polymorphisms of a structure.

    operations[i] is the flattened table of vertex i (argument tuples in
    lexicographic order); projection_indices locates the three coordinate
    projections.  Edges are one application of the full polymorphism
    clone to the seed pairs: (i, j) before (j, i) for distinct coordinate
    projections, plus (a after the first projection, second projection)
    for every unary polymorphism a.
    """

    digraph: Digraph
    group: PermGroup
    operations: tuple
    projection_indices: tuple


def _product_structure(s: Structure, power: int) -> Structure:
    n = s.domain_size
    tuples3 = list(itertools.product(range(n), repeat=power))
    idx = {t: i for i, t in enumerate(tuples3)}
    rels = {}
    for name in sorted(s.relations):
        rel = s.relations[name]
        lifted = set()
        for rows in itertools.product(rel.sorted(), repeat=power):
            lifted.add(
                tuple(idx[tuple(r[p] for r in rows)] for p in range(rel.arity))
            )
        rels[name] = Relation.make(rel.arity, lifted)
    return Structure(len(tuples3), rels)


def _extends_to_polymorphism(s: Structure, pins: dict, budget: int) -> bool:
    """Whether a partial operation (pinned cells) extends to a polymorphism."""
    nodes_left = [budget]
    pin_sets = {("t", cell): frozenset((val,)) for cell, val in pins.items()}
    problem = _Indicator(s, [], pin_sets, [], (_CELL_CAP, _INSTANCE_CAP))
    try:
        return problem.solve(nodes_left) is not None
    except _Budget:
        raise BudgetExceeded("extension search budget exhausted")


def ternary_polymorphism_digraph(
    s: Structure, allow_large: bool = False, budget: int = 2_000_000
) -> TernaryOpDigraph:
    """Digraph of ternary polymorphisms under one clone application.

    Vertices are all ternary polymorphisms M of s.  The seed pairs are
    the distinct-projection pairs and (a o first projection, second
    projection) for each unary polymorphism a; (f, g) is an edge exactly
    when some polymorphism t applied coordinatewise to the seed pairs
    yields (f, g), decided by a partial-operation extension search.  The
    group is the automorphism action by post-composition.  The result is
    always smooth and linked; failure of either check is a bug, not bad
    input.
    """
    n = s.domain_size
    if n > 2 and not allow_large:
        raise PreconditionError(
            "ternary operation digraph needs a domain of size at most 2; "
            "pass allow_large=True to override"
        )
    args3 = list(itertools.product(range(n), repeat=3))
    cube = _product_structure(s, 3)
    found = []
    _hom_search(cube, s, budget, lambda h: (found.append(tuple(h)), False)[1])
    M = sorted(found)
    if len(M) > 256 and not allow_large:
        raise BudgetExceeded(f"{len(M)} ternary operations exceed the 256 cap")
    m_index = {t: i for i, t in enumerate(M)}

    def table(fn):
        return tuple(fn(a, b, c) for (a, b, c) in args3)

    projections = [table(lambda a, b, c, i=i: (a, b, c)[i]) for i in range(3)]
    proj_idx = tuple(m_index[p] for p in projections)
    endo_list = [tuple(e) for e in endomorphisms(s)]

    seeds = []
    for i in range(3):
        for j in range(3):
            if i != j:
                seeds.append((projections[i], projections[j]))
    for e in endo_list:
        twisted = tuple(e[v] for v in projections[0])
        if twisted not in m_index:
            raise InternalCheckError("unary twist of a projection left the vertex set")
        pair = (twisted, projections[1])
        if pair not in seeds:
            seeds.append(pair)

    edges = set()
    for f in M:
        for g in M:
            pins = {}
            ok = True
            for xi in range(len(args3)):
                row = tuple(seed[0][xi] for seed in seeds)
                if pins.get(row, f[xi]) != f[xi]:
                    ok = False
                    break
                pins[row] = f[xi]
            if ok:
                for xi in range(len(args3)):
                    row = tuple(seed[1][xi] for seed in seeds)
                    if pins.get(row, g[xi]) != g[xi]:
                        ok = False
                        break
                    pins[row] = g[xi]
            if ok and _extends_to_polymorphism(s, pins, budget):
                edges.add((m_index[f], m_index[g]))

    d = Digraph(len(M), edges)
    if not d.is_smooth():
        raise InternalCheckError("ternary operation digraph is not smooth")
    _, linked = dianalysis.link_equivalence_bfs(d, 1)
    if not linked:
        raise InternalCheckError("ternary operation digraph is not linked")

    auts = [e for e in endo_list if sorted(e) == list(range(n))]
    gens = []
    for a in auts:
        perm = [m_index[tuple(a[v] for v in f)] for f in M]
        gens.append(tuple(perm))
    group = PermGroup(gens, len(M))
    return TernaryOpDigraph(d, group, tuple(M), proj_idx)


# ---------------------------------------------------------------------------
# bundled small cores


def core_corpus() -> list:
    """Named core structures on at most 3 elements used by the
    consistency tests and the corpus-wide command line checks."""

    def sym(pairs):
        return [(a, b) for a, b in pairs] + [(b, a) for a, b in pairs]

    point = Structure(1, {"E": Relation.make(2, [(0, 0)])})
    chain2 = Structure(
        2,
        {
            "E": Relation.make(2, [(0, 1)]),
            "c0": Relation.make(1, [(0,)]),
            "c1": Relation.make(1, [(1,)]),
        },
    )
    k2 = Structure(2, {"E": Relation.make(2, sym([(0, 1)]))})
    k3 = Structure(3, {"E": Relation.make(2, sym([(0, 1), (0, 2), (1, 2)]))})
    cycle3 = Structure(3, {"E": Relation.make(2, [(0, 1), (1, 2), (2, 0)])})
    k3_rigid = Structure(
        3,
        {
            "E": Relation.make(2, sym([(0, 1), (0, 2), (1, 2)])),
            "c0": Relation.make(1, [(0,)]),
            "c1": Relation.make(1, [(1,)]),
            "c2": Relation.make(1, [(2,)]),
        },
    )
    return [
        ("point", point),
        ("chain2", chain2),
        ("k2", k2),
        ("k3", k3),
        ("cycle3", cycle3),
        ("k3_rigid", k3_rigid),
    ]
