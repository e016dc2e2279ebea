"""Digraph structure analysis: smooth parts, components, algebraic
length, k-linkness, bipartiteness."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import PreconditionError
from .pplogic import EvalEnv, evaluate, make_link_formulas
from .relcore import Digraph, Relation


def smooth_part(d: Digraph, subset=None) -> frozenset:
    """Largest subset of `subset` inducing a digraph without sources or
    sinks: repeatedly drop vertices missing an in- or out-neighbor."""
    keep = set(range(d.domain_size) if subset is None else subset)
    changed = True
    while changed:
        changed = False
        for v in sorted(keep):
            if not any(w in keep for w in d.successors(v)) or not any(
                w in keep for w in d.predecessors(v)
            ):
                keep.discard(v)
                changed = True
    return frozenset(keep)


@dataclass(frozen=True)
class ComponentReport:
    vertices: tuple  # sorted
    algebraic_length_gcd: int  # 0 when every closed walk balances out
    has_algebraic_length_1: bool


def weak_components(d: Digraph) -> list:
    n = d.domain_size
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in d.edges.tuples:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    groups = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def components_and_algebraic_length(d: Digraph) -> list:
    """Per weak component: gcd of net lengths of closed walks.

    Spanning-tree potentials: walking an edge forward adds 1, backward
    subtracts 1.  Every non-tree edge contributes |pot(u)+1-pot(v)| to the
    gcd.  gcd 1 means some closed walk has net length one.
    """
    reports = []
    for comp in weak_components(d):
        pot = {comp[0]: 0}
        order = [comp[0]]
        queue = [comp[0]]
        tree_edges = set()
        while queue:
            v = queue.pop(0)
            for w in d.successors(v):
                if w not in pot:
                    pot[w] = pot[v] + 1
                    tree_edges.add((v, w))
                    queue.append(w)
                    order.append(w)
            for w in d.predecessors(v):
                if w not in pot:
                    pot[w] = pot[v] - 1
                    tree_edges.add((w, v))
                    queue.append(w)
                    order.append(w)
        g = 0
        compset = set(comp)
        for a, b in sorted(d.edges.tuples):
            if a in compset and (a, b) not in tree_edges:
                g = math.gcd(g, abs(pot[a] + 1 - pot[b]))
        reports.append(
            ComponentReport(tuple(comp), g, g == 1)
        )
    return reports


def algebraic_length_gcd(d: Digraph):
    """gcd over the whole digraph when weakly connected, else None."""
    reports = components_and_algebraic_length(d)
    if len(reports) == 1:
        return reports[0].algebraic_length_gcd
    return None


def link_equivalence_bfs(d: Digraph, k: int):
    """Equivalence closure of 'shares a ->^k target'; returns (classes,
    is_linked).  classes maps vertex -> class id (ids by least member)."""
    n = d.domain_size
    pk = d.power(k) if k > 1 else d
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    by_target = {}
    for a, b in pk.edges.tuples:
        by_target.setdefault(b, []).append(a)
    for srcs in by_target.values():
        first = srcs[0]
        for other in srcs[1:]:
            ra, rb = find(first), find(other)
            if ra != rb:
                parent[ra] = rb
    reps = {}
    classes = [0] * n
    for v in range(n):
        r = find(v)
        if r not in reps:
            reps[r] = len(reps)
    # re-number by least vertex for deterministic ids
    least = {}
    for v in range(n):
        r = find(v)
        least.setdefault(r, v)
    ordered = sorted(least, key=lambda r: least[r])
    renum = {r: i for i, r in enumerate(ordered)}
    for v in range(n):
        classes[v] = renum[find(v)]
    touched = {v for e in d.edges.tuples for v in e}
    is_linked = len({classes[v] for v in touched}) <= 1 and len(touched) == d.domain_size
    return classes, is_linked


def linkness(d: Digraph, k: int):
    """(classes, is_linked) for ->^k, cross-checked against the closure
    formula evaluated over the digraph."""
    classes, is_linked = link_equivalence_bfs(d, k)
    _, closure = make_link_formulas(k, d.domain_size)
    env = EvalEnv(d.domain_size, {"E": d.edges})
    rel = evaluate(closure, env)
    formula_pairs = rel.tuples
    bfs_pairs = frozenset(
        (x, y)
        for x in range(d.domain_size)
        for y in range(d.domain_size)
        if classes[x] == classes[y] and _has_k_walk(d, k, x) and _has_k_walk(d, k, y)
    )
    if formula_pairs != bfs_pairs:
        # vertices with no outgoing k-walk never appear in the formula;
        # anything else is a real disagreement
        raise PreconditionError(
            "link closure formula disagrees with the BFS equivalence"
        )
    return classes, is_linked


def _has_k_walk(d: Digraph, k: int, v: int) -> bool:
    cur = {v}
    for _ in range(k):
        cur = {w for u in cur for w in d.successors(u)}
        if not cur:
            return False
    return True


def minimal_linked_k(d: Digraph, bound=None):
    """Least k <= bound (default n^2) with d k-linked, else None."""
    n = d.domain_size
    if bound is None:
        bound = n * n
    for k in range(1, bound + 1):
        _, is_linked = link_equivalence_bfs(d, k)
        if is_linked:
            return k
    return None


def bipartite_and_odd_girth(d: Digraph):
    """(is_bipartite, odd_girth or None).  Requires a symmetric digraph."""
    if not d.is_symmetric():
        raise PreconditionError("bipartiteness analysis needs a symmetric digraph")
    n = d.domain_size
    color = [None] * n
    bip = True
    for start in range(n):
        if color[start] is not None:
            continue
        color[start] = 0
        queue = [start]
        while queue:
            v = queue.pop(0)
            for w in d.successors(v):
                if color[w] is None:
                    color[w] = 1 - color[v]
                    queue.append(w)
                elif color[w] == color[v]:
                    bip = False
    if bip:
        return True, None
    best = None
    for s in range(n):
        # BFS over (vertex, parity)
        dist = {(s, 0): 0}
        queue = [(s, 0)]
        while queue:
            (v, p) = queue.pop(0)
            for w in d.successors(v):
                key = (w, 1 - p)
                if key not in dist:
                    dist[key] = dist[(v, p)] + 1
                    queue.append(key)
        if (s, 1) in dist:
            odd = dist[(s, 1)]
            if best is None or odd < best:
                best = odd
    return False, best


def analyze(d: Digraph) -> dict:
    """Everything at once, as stable JSON-ready keys."""
    smooth = smooth_part(d)
    reports = components_and_algebraic_length(d)
    out = {
        "smooth": len(smooth) == d.domain_size and d.domain_size > 0 and d.is_smooth(),
        "smooth_part": sorted(smooth),
        "components": [
            {
                "vertices": list(r.vertices),
                "alg_length_gcd": r.algebraic_length_gcd,
                "has_algebraic_length_1": r.has_algebraic_length_1,
            }
            for r in reports
        ],
        "alg_length_gcd": algebraic_length_gcd(d),
    }
    mk = minimal_linked_k(d)
    out["linked_k"] = mk
    out["linked"] = mk == 1
    out["linked_note"] = (
        None if mk is not None else f"not k-linked for k <= {d.domain_size ** 2}"
    )
    if d.is_symmetric():
        bip, og = bipartite_and_odd_girth(d)
        out["bipartite"] = bip
        out["odd_girth"] = og
    else:
        out["bipartite"] = None
        out["odd_girth"] = None
    return out
