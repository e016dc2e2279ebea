"""Relations, finite structures, permutation groups, quotients.

Everything here is finite and index-based: domains are always
``range(n)``.  Relations are immutable sets of int tuples; structures
keep an ordered name -> relation map.  All higher layers build on these
types.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import BudgetExceeded, ParseError, PreconditionError

# Default ceiling for group closures; spec'd interfaces pass their own.
GROUP_CAP = 100000


# ---------------------------------------------------------------------------
# relations


@dataclass(frozen=True)
class Relation:
    """A finite relation: fixed arity, frozenset of int tuples."""

    arity: int
    tuples: frozenset

    @staticmethod
    def make(arity: int, tuples: Iterable[Sequence[int]]) -> "Relation":
        out = set()
        for t in tuples:
            t = tuple(int(x) for x in t)
            if len(t) != arity:
                raise PreconditionError(f"tuple {t} has length {len(t)}, expected arity {arity}")
            out.add(t)
        return Relation(arity, frozenset(out))

    @staticmethod
    def full(arity: int, n: int) -> "Relation":
        def rec(a):
            if a == 0:
                return [()]
            return [t + (x,) for t in rec(a - 1) for x in range(n)]

        return Relation(arity, frozenset(rec(arity)))

    @staticmethod
    def equality(n: int) -> "Relation":
        return Relation(2, frozenset((x, x) for x in range(n)))

    def __contains__(self, t) -> bool:
        return tuple(t) in self.tuples

    def __len__(self) -> int:
        return len(self.tuples)

    def sorted(self) -> list:
        return sorted(self.tuples)

    def is_full(self, n: int) -> bool:
        return len(self.tuples) == n ** self.arity

    def is_empty(self) -> bool:
        return not self.tuples

    def project(self, coords: Sequence[int]) -> "Relation":
        return Relation(len(coords), frozenset(tuple(t[c] for c in coords) for t in self.tuples))

    def column(self, i: int) -> set:
        return {t[i] for t in self.tuples}

    def support(self) -> set:
        out = set()
        for t in self.tuples:
            out.update(t)
        return out

    def inverse(self) -> "Relation":
        if self.arity != 2:
            raise PreconditionError("inverse needs a binary relation")
        return Relation(2, frozenset((b, a) for a, b in self.tuples))

    def restrict(self, keep: Iterable[int]) -> "Relation":
        keep = set(keep)
        return Relation(self.arity, frozenset(t for t in self.tuples if all(x in keep for x in t)))

    def reindex(self, old_to_new: Mapping[int, int]) -> "Relation":
        """Rename elements; tuples touching unmapped elements are dropped."""
        out = set()
        for t in self.tuples:
            if all(x in old_to_new for x in t):
                out.add(tuple(old_to_new[x] for x in t))
        return Relation(self.arity, frozenset(out))

    def is_totally_symmetric(self) -> bool:
        # adjacent transpositions generate all permutations
        for t in self.tuples:
            for i in range(len(t) - 1):
                u = list(t)
                u[i], u[i + 1] = u[i + 1], u[i]
                if tuple(u) not in self.tuples:
                    return False
        return True

    def contains_all_repeats(self, n: int) -> bool:
        """Totally reflexive over range(n): holds on every tuple with a repeat."""

        def gen(a):
            if a == 0:
                yield ()
                return
            for t in gen(a - 1):
                for x in range(n):
                    yield t + (x,)

        for t in gen(self.arity):
            if len(set(t)) < self.arity and t not in self.tuples:
                return False
        return True


def compose(R: Relation, S: Relation) -> Relation:
    """Relational composition.

    binary∘binary -> binary {(x,z) : ∃y R(x,y) ∧ S(y,z)};
    unary∘binary -> unary  {y : ∃x R(x) ∧ S(x,y)}.
    """
    if S.arity != 2:
        raise PreconditionError("compose: right argument must be binary")
    if R.arity == 2:
        by_first = {}
        for y, z in S.tuples:
            by_first.setdefault(y, []).append(z)
        out = set()
        for x, y in R.tuples:
            for z in by_first.get(y, ()):
                out.add((x, z))
        return Relation(2, frozenset(out))
    if R.arity == 1:
        members = {t[0] for t in R.tuples}
        return Relation(1, frozenset((z,) for y, z in S.tuples if y in members))
    raise PreconditionError("compose: left argument must be unary or binary")


def relation_power(R: Relation, k: int) -> Relation:
    if R.arity != 2 or k < 1:
        raise PreconditionError("relation_power needs a binary relation and k >= 1")
    out = R
    for _ in range(k - 1):
        out = compose(out, R)
    return out


def is_subdirect(R: Relation, domain_size: int) -> bool:
    """Every coordinate projects onto the whole domain."""
    for i in range(R.arity):
        if R.column(i) != set(range(domain_size)):
            return False
    return True


def or_relation(R: Relation, S: Relation, domain_size: int, budget: int = 500000,
                universe: Iterable[int] = None) -> Relation:
    """OR(R,S): concatenated tuples where the R-block or the S-block holds.

    The free block ranges over ``universe`` (default: the whole domain); pass
    a carrier when the disjunction lives on a definable subset.
    """
    uni = sorted(range(domain_size) if universe is None else set(universe))
    n = len(uni)
    size_est = len(R) * n ** S.arity + len(S) * n ** R.arity
    if size_est > budget:
        raise BudgetExceeded(f"or_relation would materialize about {size_est} tuples")

    def all_tuples(a):
        if a == 0:
            return [()]
        smaller = all_tuples(a - 1)
        return [t + (x,) for t in smaller for x in uni]

    out = set()
    full_s = all_tuples(S.arity)
    for t in R.tuples:
        for u in full_s:
            out.add(t + u)
    full_r = all_tuples(R.arity)
    for u in S.tuples:
        for t in full_r:
            out.add(t + u)
    return Relation(R.arity + S.arity, frozenset(out))


def apply_perm(perm: Sequence[int], t: Sequence[int]) -> tuple:
    return tuple(perm[x] for x in t)


def perm_inverse(perm: Sequence[int]) -> tuple:
    inv = [0] * len(perm)
    for i, v in enumerate(perm):
        inv[v] = i
    return tuple(inv)


def perm_power(perm: Sequence[int], k: int) -> tuple:
    n = len(perm)
    if k < 0:
        return perm_power(perm_inverse(perm), -k)
    out = tuple(range(n))
    p = tuple(perm)
    while k:
        if k & 1:
            out = tuple(p[x] for x in out)
        p = tuple(p[x] for x in p)
        k >>= 1
    return out


def transport_relation(R: Relation, perm: Sequence[int]) -> Relation:
    """Pointwise image of R under a permutation."""
    return Relation(R.arity, frozenset(apply_perm(perm, t) for t in R.tuples))


def transport_relation_per_coord(R: Relation, perms: Sequence[Sequence[int]]) -> Relation:
    """Apply a (possibly different) permutation to each coordinate."""
    if len(perms) != R.arity:
        raise PreconditionError("need one permutation per coordinate")
    return Relation(
        R.arity, frozenset(tuple(p[x] for p, x in zip(perms, t)) for t in R.tuples)
    )


# ---------------------------------------------------------------------------
# structures and digraphs


class Structure:
    """Finite relational structure with named, ordered relations."""

    def __init__(self, domain_size: int, relations: Mapping[str, Relation]):
        if domain_size < 1:
            raise PreconditionError("domain must be nonempty")
        self.domain_size = int(domain_size)
        self.relations = dict(relations)
        for name, rel in self.relations.items():
            for t in rel.tuples:
                if any(not (0 <= x < domain_size) for x in t):
                    raise PreconditionError(f"relation {name}: tuple {t} out of domain")

    def relation(self, name: str) -> Relation:
        return self.relations[name]

    def __eq__(self, other):
        return (
            isinstance(other, Structure)
            and self.domain_size == other.domain_size
            and self.relations == other.relations
        )

    def __repr__(self):
        rels = ", ".join(f"{k}:{len(v)}" for k, v in self.relations.items())
        return f"Structure(n={self.domain_size}, {rels})"


class Digraph:
    """A structure with one binary relation named E, plus graph helpers."""

    def __init__(self, domain_size: int, edges: Iterable[Sequence[int]]):
        self.domain_size = int(domain_size)
        self.edges = Relation.make(2, edges)
        for a, b in self.edges.tuples:
            if not (0 <= a < domain_size and 0 <= b < domain_size):
                raise PreconditionError(f"edge ({a},{b}) out of domain")
        self._succ = None
        self._pred = None

    @staticmethod
    def from_relation(domain_size: int, rel: Relation) -> "Digraph":
        if rel.arity != 2:
            raise PreconditionError("digraph edge relation must be binary")
        return Digraph(domain_size, rel.tuples)

    def as_structure(self) -> Structure:
        return Structure(self.domain_size, {"E": self.edges})

    def successors(self, v: int) -> tuple:
        if self._succ is None:
            succ = [[] for _ in range(self.domain_size)]
            pred = [[] for _ in range(self.domain_size)]
            for a, b in sorted(self.edges.tuples):
                succ[a].append(b)
                pred[b].append(a)
            self._succ = [tuple(x) for x in succ]
            self._pred = [tuple(x) for x in pred]
        return self._succ[v]

    def predecessors(self, v: int) -> tuple:
        self.successors(0)
        return self._pred[v]

    def is_symmetric(self) -> bool:
        return all((b, a) in self.edges for a, b in self.edges.tuples)

    def has_loop(self) -> bool:
        return any(a == b for a, b in self.edges.tuples)

    def loops(self) -> list:
        return sorted(a for a, b in self.edges.tuples if a == b)

    def is_smooth(self) -> bool:
        return all(self.successors(v) and self.predecessors(v) for v in range(self.domain_size))

    def power(self, k: int) -> "Digraph":
        return Digraph.from_relation(self.domain_size, relation_power(self.edges, k))

    def reverse(self) -> "Digraph":
        return Digraph.from_relation(self.domain_size, self.edges.inverse())

    def restrict(self, verts: Iterable[int]):
        """Induced subgraph re-indexed along sorted(verts).

        Returns (digraph, embed) where embed[new] = old.
        """
        verts = sorted(set(verts))
        if not verts:
            raise PreconditionError("cannot restrict to the empty set")
        old_to_new = {v: i for i, v in enumerate(verts)}
        edges = [
            (old_to_new[a], old_to_new[b])
            for a, b in self.edges.tuples
            if a in old_to_new and b in old_to_new
        ]
        return Digraph(len(verts), edges), verts

    def __eq__(self, other):
        return (
            isinstance(other, Digraph)
            and self.domain_size == other.domain_size
            and self.edges == other.edges
        )

    def __repr__(self):
        return f"Digraph(n={self.domain_size}, m={len(self.edges)})"


# ---------------------------------------------------------------------------
# permutation groups


class PermGroup:
    """Closure of a generating set of permutations of range(n)."""

    def __init__(self, generators: Iterable[Sequence[int]], domain_size: int, cap: int = GROUP_CAP):
        self.domain_size = int(domain_size)
        gens = []
        ident = tuple(range(domain_size))
        for g in generators:
            g = tuple(int(x) for x in g)
            if len(g) != domain_size or sorted(g) != list(range(domain_size)):
                raise PreconditionError(f"not a permutation of range({domain_size}): {g}")
            if g != ident:
                gens.append(g)
        self.generators = tuple(gens)
        # BFS closure; elements stay sorted for determinism.
        seen = {ident}
        frontier = [ident]
        while frontier:
            nxt = []
            for p in frontier:
                for g in self.generators:
                    q = tuple(g[x] for x in p)
                    if q not in seen:
                        seen.add(q)
                        nxt.append(q)
                        if len(seen) > cap:
                            raise BudgetExceeded(f"group closure exceeded cap {cap}")
            frontier = nxt
        self.elements = tuple(sorted(seen))
        self._elemset = seen

    @staticmethod
    def trivial(domain_size: int) -> "PermGroup":
        return PermGroup([], domain_size)

    @property
    def order(self) -> int:
        return len(self.elements)

    def is_trivial(self) -> bool:
        return self.order == 1

    def __contains__(self, perm) -> bool:
        return tuple(perm) in self._elemset

    def orbit_of_tuple(self, t: Sequence[int]) -> frozenset:
        t = tuple(t)
        return frozenset(apply_perm(g, t) for g in self.elements)

    def orbits(self, k: int) -> list:
        """All orbits of k-tuples, listed by lexicographically least rep.
        Partitions A^k."""
        seen = set()
        out = []

        def gen(a):
            if a == 0:
                yield ()
                return
            for t in gen(a - 1):
                for x in range(self.domain_size):
                    yield t + (x,)

        for t in gen(k):
            if t in seen:
                continue
            orb = self.orbit_of_tuple(t)
            seen.update(orb)
            out.append(orb)
        return out

    def n_orbits(self, k: int) -> int:
        return len(self.orbits(k))

    def orbits1(self) -> list:
        """1-orbits as sorted tuples of vertices, ordered by least element."""
        return [tuple(sorted(x for (x,) in orb)) for orb in self.orbits(1)]

    def orbit_of_point(self, v: int) -> tuple:
        return tuple(sorted({g[v] for g in self.elements}))

    def restrict(self, verts: Sequence[int]) -> "PermGroup":
        """Restriction to an invariant vertex set, re-indexed along sorted order."""
        verts = sorted(set(verts))
        pos = {v: i for i, v in enumerate(verts)}
        gens = []
        for g in self.generators:
            img = [g[v] for v in verts]
            if any(x not in pos for x in img):
                raise PreconditionError("vertex set is not invariant under the group")
            gens.append(tuple(pos[x] for x in img))
        return PermGroup(gens, len(verts))


def group_closure(generators, domain_size: int, cap: int = GROUP_CAP) -> PermGroup:
    return PermGroup(generators, domain_size, cap=cap)


class OrbitRelationO:
    """The orbit relation O: (v_0..v_{n-1}) ∈ O iff i ↦ v_i is in G.

    Stays virtual (membership only) above MATERIALIZE_LIMIT arity.
    """

    MATERIALIZE_LIMIT = 8

    def __init__(self, group: PermGroup):
        self.group = group
        self.arity = group.domain_size

    def __contains__(self, t) -> bool:
        t = tuple(t)
        return len(t) == self.arity and t in self.group._elemset

    def as_relation(self) -> Relation:
        if self.arity > self.MATERIALIZE_LIMIT:
            raise BudgetExceeded(
                f"orbit relation of arity {self.arity} is kept virtual "
                f"(limit {self.MATERIALIZE_LIMIT})"
            )
        return Relation(self.arity, frozenset(self.group.elements))


class RankedGroup:
    """A group of rank-indexed families of automorphisms.

    kind=constant: the families f_i = g for every rank i, with g running
    over the group generated by the given bases.
    kind=geometric: the single-generator family f_i = g^i (negative ranks
    use the inverse).
    """

    def __init__(self, kind: str, g, domain_size: int, rank_window: int = 8):
        if kind not in ("constant", "geometric"):
            raise PreconditionError(f"unknown ranked family kind {kind!r}")
        self.kind = kind
        if g and not isinstance(g[0], int):
            bases = [tuple(p) for p in g]
        else:
            bases = [tuple(g)]
        if kind == "geometric" and len(bases) != 1:
            raise PreconditionError("geometric families take a single base")
        self.bases = bases
        self.g = bases[0]
        self.domain_size = domain_size
        self.rank_window = rank_window
        for p in bases:
            if sorted(p) != list(range(domain_size)):
                raise PreconditionError("ranked family base is not a permutation")

    @staticmethod
    def trivial(domain_size: int) -> "RankedGroup":
        return RankedGroup("constant", range(domain_size), domain_size)

    @staticmethod
    def constant(G: PermGroup) -> "RankedGroup":
        return RankedGroup("constant", list(G.generators) or [tuple(range(G.domain_size))],
                           G.domain_size)

    def member(self, i: int) -> tuple:
        if self.kind == "constant":
            return self.g
        return perm_power(self.g, i)

    def projection_group(self) -> PermGroup:
        return PermGroup(self.bases, self.domain_size)

    def acts_on_ranked(self, rel: Relation, ranking: Sequence[int], base=None) -> Relation:
        if self.kind == "constant":
            perms = [tuple(base if base is not None else self.g)] * len(ranking)
        else:
            perms = [perm_power(self.g, r) for r in ranking]
        return transport_relation_per_coord(rel, perms)

    def leaves_invariant(self, rel: Relation, ranking: Sequence[int]) -> bool:
        if self.kind == "constant":
            return all(self.acts_on_ranked(rel, ranking, base=p) == rel for p in self.bases)
        return self.acts_on_ranked(rel, ranking) == rel


# ---------------------------------------------------------------------------
# quotients, endomorphisms, cores


def _quotient_core(domain_size, relations: Mapping[str, Relation], G: PermGroup):
    if G.domain_size != domain_size:
        raise PreconditionError("group acts on a different domain")
    for name, rel in relations.items():
        for g in G.generators:
            for t in rel.tuples:
                if apply_perm(g, t) not in rel:
                    raise PreconditionError(
                        f"group does not preserve relation {name}: "
                        f"generator {g} maps tuple {t} outside"
                    )
    orbs = G.orbits(1)
    reps = sorted(min(x for (x,) in orb) for orb in orbs)
    orbit_of = [0] * domain_size
    for idx, rep in enumerate(reps):
        for (x,) in G.orbit_of_tuple((rep,)):
            orbit_of[x] = idx
    qrels = {}
    for name, rel in relations.items():
        qrels[name] = Relation(
            rel.arity, frozenset(tuple(orbit_of[x] for x in t) for t in rel.tuples)
        )
    return len(reps), qrels, orbit_of


def quotient(s, G: PermGroup):
    """Quotient by group orbits.

    Returns (quotient structure/digraph, orbit index per element).  The
    group must preserve every relation; violations name the tuple and
    generator.
    """
    if isinstance(s, Digraph):
        n, rels, orbit_of = _quotient_core(s.domain_size, {"E": s.edges}, G)
        return Digraph.from_relation(n, rels["E"]), orbit_of
    n, rels, orbit_of = _quotient_core(s.domain_size, s.relations, G)
    return Structure(n, rels), orbit_of


def _hom_search(s: Structure, target: Structure, budget, collect, require=None):
    """Backtracking homomorphism search s -> target.

    collect(mapping) is called on each total hom; returning True stops the
    search.  require(i, v, partial) can veto assignments.
    """
    n = s.domain_size
    rel_items = list(s.relations.items())
    # group tuples by highest-numbered vertex so constraints fire as early
    # as possible
    by_max = [[] for _ in range(n)]
    for name, rel in rel_items:
        trel = target.relations.get(name)
        if trel is None or trel.arity != rel.arity:
            raise PreconditionError(f"target lacks relation {name} of matching arity")
        for t in rel.tuples:
            by_max[max(t)].append((t, trel))
    nodes = 0
    mapping = [None] * n

    def extend(i):
        nonlocal nodes
        if i == n:
            return bool(collect(tuple(mapping)))
        for v in range(target.domain_size):
            nodes += 1
            if nodes > budget:
                raise BudgetExceeded(f"homomorphism search exceeded {budget} nodes")
            if require is not None and not require(i, v, mapping):
                continue
            mapping[i] = v
            ok = True
            for t, trel in by_max[i]:
                if tuple(mapping[x] for x in t) not in trel:
                    ok = False
                    break
            if ok and extend(i + 1):
                return True
            mapping[i] = None
        return False

    extend(0)
    return nodes


def endomorphisms(s: Structure, budget: int = 2000000) -> list:
    """All endomorphisms of s, lexicographically sorted."""
    out = []
    _hom_search(s, s, budget, lambda m: out.append(m) or False)
    return out


def is_core(s: Structure, budget: int = 2000000) -> bool:
    """True iff every endomorphism is injective (search stops at the first
    non-injective one)."""
    found = []

    def collect(m):
        if len(set(m)) < len(m):
            found.append(m)
            return True
        return False

    _hom_search(s, s, budget, collect)
    return not found


def automorphism_group(s: Structure, budget: int = 2000000) -> PermGroup:
    autos = [m for m in endomorphisms(s, budget) if len(set(m)) == len(m)]
    return PermGroup(autos, s.domain_size)


# ---------------------------------------------------------------------------
# file formats


def parse_digraph(text: str) -> Digraph:
    """Text format: comments with '#', header 'digraph n' or 'graph n'
    (graph symmetrizes), then one 'u v' edge per line."""
    n = None
    symmetric = False
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if n is None:
            if len(parts) != 2 or parts[0] not in ("digraph", "graph"):
                raise ParseError("expected header 'digraph <n>' or 'graph <n>'", line=lineno)
            try:
                n = int(parts[1])
            except ValueError:
                raise ParseError(f"bad vertex count {parts[1]!r}", line=lineno)
            if n < 1:
                raise ParseError("vertex count must be positive", line=lineno)
            symmetric = parts[0] == "graph"
            continue
        if len(parts) != 2:
            raise ParseError(f"expected 'u v', got {line!r}", line=lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer endpoint in {line!r}", line=lineno)
        if not (0 <= u < n and 0 <= v < n):
            raise ParseError(f"edge ({u},{v}) out of range for n={n}", line=lineno)
        edges.append((u, v))
        if symmetric:
            edges.append((v, u))
    if n is None:
        raise ParseError("empty digraph file")
    return Digraph(n, edges)


def format_digraph(d: Digraph) -> str:
    lines = [f"digraph {d.domain_size}"]
    lines.extend(f"{a} {b}" for a, b in d.edges.sorted())
    return "\n".join(lines) + "\n"


def parse_structure_json(text: str) -> Structure:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"bad JSON: {e.msg}", line=e.lineno, col=e.colno)
    if not isinstance(obj, dict) or "domain" not in obj or "relations" not in obj:
        raise ParseError("structure JSON needs 'domain' and 'relations' keys")
    n = obj["domain"]
    if not isinstance(n, int) or n < 1:
        raise ParseError("'domain' must be a positive integer")
    rels = {}
    if not isinstance(obj["relations"], dict):
        raise ParseError("'relations' must be an object")
    for name, spec in obj["relations"].items():
        if not isinstance(spec, dict) or "arity" not in spec or "tuples" not in spec:
            raise ParseError(f"relation {name!r} needs 'arity' and 'tuples'")
        try:
            rels[name] = Relation.make(spec["arity"], spec["tuples"])
        except PreconditionError as e:
            raise ParseError(f"relation {name!r}: {e}")
    try:
        return Structure(n, rels)
    except PreconditionError as e:
        raise ParseError(str(e))


def format_structure_json(s: Structure) -> str:
    obj = {
        "domain": s.domain_size,
        "relations": {
            name: {"arity": rel.arity, "tuples": [list(t) for t in rel.sorted()]}
            for name, rel in s.relations.items()
        },
    }
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def parse_group(text: str, domain_size: int) -> PermGroup:
    """One generator per line: 'perm <n>: i0 i1 ... i{n-1}'."""
    gens = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not line.startswith("perm"):
            raise ParseError(f"expected 'perm <n>: ...', got {line!r}", line=lineno)
        head, _, imgs = line.partition(":")
        parts = head.split()
        if len(parts) != 2:
            raise ParseError("malformed perm header", line=lineno)
        try:
            n = int(parts[1])
        except ValueError:
            raise ParseError(f"bad perm size {parts[1]!r}", line=lineno)
        if n != domain_size:
            raise ParseError(
                f"perm acts on {n} points but the input has {domain_size}", line=lineno
            )
        try:
            perm = tuple(int(x) for x in imgs.split())
        except ValueError:
            raise ParseError("non-integer image in perm line", line=lineno)
        if sorted(perm) != list(range(domain_size)):
            raise ParseError(f"line is not a permutation of range({domain_size})", line=lineno)
        gens.append(perm)
    return PermGroup(gens, domain_size)


def format_group(G: PermGroup) -> str:
    lines = [f"perm {G.domain_size}: " + " ".join(map(str, g)) for g in G.generators]
    if not lines:
        lines = [f"perm {G.domain_size}: " + " ".join(map(str, range(G.domain_size)))]
    return "\n".join(lines) + "\n"
