"""Brute-force arboricity certificates and triangle oracles.

Exact mode evaluates the density characterisation
``max over H (|V(H)| >= 2) of ceil(|E(H)| / (|V(H)| - 1))`` by exhaustive
subgraph enumeration (small graphs only).  Upper-bound mode produces a
verified forest cover by repeated low-degree peeling.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

from .graphs import Graph

EXACT_MODE_LIMIT = 16


@dataclass(frozen=True)
class ArboricityCertificate:
    value: int
    mode: str  # "exact" | "upper_bound"
    # exact: the maximizing node subset; upper_bound: tuple of forests,
    # each a tuple of edges.
    witness: tuple

    def __post_init__(self):
        if self.mode not in ("exact", "upper_bound"):
            raise ValueError(f"bad certificate mode {self.mode!r}")


class ExactModeTooLarge(ValueError):
    pass


def arboricity_exact(g: Graph, limit: int = EXACT_MODE_LIMIT) -> ArboricityCertificate:
    """Exhaustive Nash-Williams density maximisation.

    Among subsets attaining the maximum ceiling the lexicographically
    smallest node set is kept as witness.
    """
    if g.n > limit:
        raise ExactModeTooLarge(
            f"graph has {g.n} nodes > exact mode limit {limit}; use arboricity_upper"
        )
    if g.m == 0:
        return ArboricityCertificate(value=0, mode="exact", witness=())

    ids = list(g.ids)
    n = len(ids)
    # Bitmask adjacency for fast edge counting.
    idx = {v: i for i, v in enumerate(ids)}
    adj = [0] * n
    for u, v in g.edges:
        adj[idx[u]] |= 1 << idx[v]
        adj[idx[v]] |= 1 << idx[u]

    best_val = 0
    best_witness: tuple[int, ...] | None = None
    for mask in range(3, 1 << n):
        size = mask.bit_count()
        if size < 2:
            continue
        edges_in = 0
        mm = mask
        while mm:
            i = (mm & -mm).bit_length() - 1
            mm &= mm - 1
            edges_in += (adj[i] & mask).bit_count()
        edges_in //= 2
        if edges_in == 0:
            continue
        val = -(-edges_in // (size - 1))  # ceil
        if val > best_val:
            best_val = val
            best_witness = None
        # Track the lexicographically smallest witness among maximizers.
        if val == best_val:
            wit = tuple(ids[i] for i in range(n) if mask >> i & 1)
            if best_witness is None or wit < best_witness:
                best_witness = wit
    assert best_witness is not None
    return ArboricityCertificate(value=best_val, mode="exact", witness=best_witness)


def arboricity_upper(g: Graph, beta: int = 2) -> ArboricityCertificate:
    """Forest cover by low-degree peeling (sequential oracle).

    Peels nodes of degree <= beta * average degree each phase, orienting
    their remaining edges outward (ties toward the smaller ID).  Each
    node's out-edges are spread over slots 1..out_degree; slot classes
    form the cover.  Every forest is verified acyclic.
    """
    if beta < 2:
        raise ValueError("beta must be >= 2")
    if g.m == 0:
        return ArboricityCertificate(value=0, mode="upper_bound", witness=())

    alive = set(g.ids)
    residual: dict[int, set[int]] = {v: set(g.neighbors(v)) for v in g.ids}
    out_edges: dict[int, list[int]] = {v: [] for v in g.ids}
    while any(residual[v] for v in alive) or alive:
        live = sorted(v for v in alive)
        if not live:
            break
        total_deg = sum(len(residual[v]) for v in live)
        if total_deg == 0:
            break
        avg = Fraction(total_deg, len(live))
        removed = [v for v in live if len(residual[v]) <= beta * avg]
        removed_set = set(removed)
        for v in removed:
            for w in sorted(residual[v]):
                if w in removed_set:
                    # Both endpoints removed this phase: orient toward
                    # the smaller ID, so the larger one owns the out-edge.
                    if w < v:
                        out_edges[v].append(w)
                else:
                    out_edges[v].append(w)
        for v in removed:
            for w in residual[v]:
                residual[w].discard(v)
            residual[v] = set()
            alive.discard(v)

    d = max((len(es) for es in out_edges.values()), default=0)
    forests: list[list[tuple[int, int]]] = [[] for _ in range(d)]
    for v in sorted(out_edges):
        for slot, w in enumerate(sorted(out_edges[v])):
            forests[slot].append((v, w))
    for forest in forests:
        _check_forest(forest)
    witness = tuple(tuple(sorted(f)) for f in forests)
    return ArboricityCertificate(value=max(d, 1), mode="upper_bound", witness=witness)


def _check_forest(edges: list[tuple[int, int]]) -> None:
    parent: dict[int, int] = {}

    def find(x):
        root = x
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(x, x) != x:
            parent[x], x = root, parent[x]
        return root

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru == rv:
            raise AssertionError("forest cover contains a cycle")
        parent[ru] = rv


def triangles_bruteforce(
    g: Graph, candidates: set[tuple[int, int, int]] | None = None
) -> set[tuple[int, int, int]]:
    """All node triples whose three edges exist, as sorted tuples.

    Restricted to ``candidates`` when given.
    """
    out: set[tuple[int, int, int]] = set()
    if candidates is not None:
        for t in candidates:
            u, v, w = sorted(t)
            if len({u, v, w}) < 3:
                continue
            if g.has_edge(u, v) and g.has_edge(v, w) and g.has_edge(u, w):
                out.add((u, v, w))
        return out
    for u, v in g.sorted_edges():
        nu = set(g.neighbors(u))
        for w in g.neighbors(v):
            if w > v and w in nu:
                out.add((u, v, w))
    return out


def triangle_edge_bound_check(g: Graph) -> bool:
    """|E| >= (sqrt(2)/3) * k^(2/3) with k the triangle count.

    Checked in exact integer arithmetic: the inequality is equivalent to
    729 * |E|^6 >= 8 * k^4 for nonnegative quantities.
    """
    k = len(triangles_bruteforce(g))
    e = g.m
    return 729 * e ** 6 >= 8 * k ** 4


def clique_arboricity(n: int) -> int:
    """Reference value ceil(n/2) for K_n."""
    return math.ceil(n / 2)


def min_size_floors(a: int) -> tuple[int, int]:
    """(node floor, edge floor) for a graph of exact arboricity a:
    at least 2a-1 nodes and at least 2(a-1)^2 + 1 edges."""
    return (2 * a - 1, 2 * (a - 1) ** 2 + 1)
