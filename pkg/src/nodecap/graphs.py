"""Graph representation, deterministic generators, and the text file format.

Graphs are undirected and simple.  Node identifiers are unsigned words,
pairwise distinct, bounded by ``id_bound`` (polynomial ID space:
``id_bound <= n**ID_SPACE_EXPONENT``).  Generators are pure functions of
(kind, params, seed): identical calls yield identical edge sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .words import check_word, coin_below, coin_bit

# Exponent c of the admissible ID space [1, n^c].  Also the `c_id`
# constant used by interval-search round bounds downstream.
ID_SPACE_EXPONENT = 2


@dataclass(frozen=True)
class Graph:
    ids: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    id_bound: int
    node_labels: dict[int, tuple[int, ...]] | None = None
    edge_labels: dict[tuple[int, int], tuple[int, ...]] | None = None
    label_len: int = 0
    provenance: tuple = ()

    def __post_init__(self):
        ids = tuple(sorted(self.ids))
        object.__setattr__(self, "ids", ids)
        idset = set(ids)
        if len(idset) != len(ids):
            raise ValueError("node ids must be pairwise distinct")
        for v in ids:
            check_word(v, "node id")
            if v > self.id_bound:
                raise ValueError(f"id {v} exceeds id_bound {self.id_bound}")
        norm = set()
        for e in self.edges:
            u, v = e
            if u == v:
                raise ValueError("self-loop")
            if u not in idset or v not in idset:
                raise ValueError(f"edge endpoint not in ids: {e}")
            norm.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", frozenset(norm))
        if self.label_len:
            for lab in (self.node_labels or {}).values():
                if len(lab) != self.label_len:
                    raise ValueError("node label length mismatch")
            for lab in (self.edge_labels or {}).values():
                if len(lab) != self.label_len:
                    raise ValueError("edge label length mismatch")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self._adj().get(v, ())

    def degree(self, v: int) -> int:
        return len(self._adj().get(v, ()))

    def _adj(self) -> dict[int, tuple[int, ...]]:
        cached = getattr(self, "_adj_cache", None)
        if cached is None:
            adj: dict[int, list[int]] = {v: [] for v in self.ids}
            for u, v in sorted(self.edges):
                adj[u].append(v)
                adj[v].append(u)
            cached = {v: tuple(sorted(ws)) for v, ws in adj.items()}
            object.__setattr__(self, "_adj_cache", cached)
        return cached

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        seen = {self.ids[0]}
        stack = [self.ids[0]]
        while stack:
            v = stack.pop()
            for w in self.neighbors(v):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.n


def _path_edges(lo: int, hi: int) -> set[tuple[int, int]]:
    return {(i, i + 1) for i in range(lo, hi)}


def generate(kind: str, params: dict, seed: int = 0) -> Graph:
    """Deterministic graph per (kind, params, seed).

    Kinds: path(n), star(n), clique(n), forest-union(n, a),
    lollipop(a), ensemble(a, k).  Optional params: ``random_ids=1``
    re-draws distinct random IDs in [1, n^2]; ``id_bound`` overrides the
    default bound of n^2 (must stay within the polynomial ID space).
    """
    p = dict(params)
    random_ids = bool(p.pop("random_ids", 0))
    id_bound_override = p.pop("id_bound", None)

    if kind == "path":
        n = _need_int(p, "n", minimum=1)
        ids = tuple(range(1, n + 1))
        edges = _path_edges(1, n)
    elif kind == "star":
        n = _need_int(p, "n", minimum=1)
        ids = tuple(range(1, n + 1))
        edges = {(1, i) for i in range(2, n + 1)}
    elif kind == "clique":
        n = _need_int(p, "n", minimum=1)
        ids = tuple(range(1, n + 1))
        edges = {(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)}
    elif kind == "forest-union":
        n = _need_int(p, "n", minimum=1)
        a = _need_int(p, "a", minimum=1)
        ids = tuple(range(1, n + 1))
        edges = set()
        for f in range(a):
            # A seeded random spanning tree: attach each node (in a
            # seeded shuffle order) to a uniformly chosen earlier node.
            order = _seeded_shuffle(list(ids), seed, f)
            for i in range(1, n):
                j = coin_below(seed, i, 101, f, i)
                u, v = order[i], order[j]
                edges.add((min(u, v), max(u, v)))
    elif kind == "lollipop":
        a = _need_int(p, "a", minimum=2)
        n = a ** 3
        ids = tuple(range(1, n + 1))
        edges = _path_edges(1, n)
        dense = list(range(n - a + 1, n + 1))
        for i in range(len(dense)):
            for j in range(i + 1, len(dense)):
                u, v = dense[i], dense[j]
                if (u, v) in edges:
                    continue
                if coin_bit(seed, 7, u, v):
                    edges.add((u, v))
    elif kind == "ensemble":
        a = _need_int(p, "a", minimum=2)
        k = _need_int(p, "k", minimum=1)
        block = a ** 3
        n = k * block
        ids = tuple(range(1, n + 1))
        edges = set()
        for c in range(k):
            off = c * block
            edges |= _path_edges(off + 1, off + block)
            dense = list(range(off + block - a + 1, off + block + 1))
            for i in range(len(dense)):
                for j in range(i + 1, len(dense)):
                    u, v = dense[i], dense[j]
                    if (u, v) in edges:
                        continue
                    if coin_bit(seed, 7, u, v):
                        edges.add((u, v))
            if c + 1 < k:
                edges.add((off + block, off + block + 1))
    else:
        raise ValueError(f"unknown generator kind: {kind}")

    if p:
        raise ValueError(f"unused params for {kind}: {sorted(p)}")

    id_bound = n ** ID_SPACE_EXPONENT if n > 1 else max(n, 1)
    if id_bound_override is not None:
        if not (max(ids) <= id_bound_override <= max(n, 1) ** ID_SPACE_EXPONENT):
            raise ValueError("id_bound override outside admissible range")
        id_bound = id_bound_override

    if random_ids:
        # Distinct random IDs in [1, n^2 - 1]; the mapping preserves the
        # relative order of the default IDs.
        bound = n ** ID_SPACE_EXPONENT
        chosen: set[int] = set()
        ctr = 0
        while len(chosen) < n:
            x = 1 + coin_below(seed, bound - 1, 31, ctr)
            ctr += 1
            chosen.add(x)
        remap = dict(zip(ids, sorted(chosen)))
        ids = tuple(sorted(remap.values()))
        edges = {(min(remap[u], remap[v]), max(remap[u], remap[v])) for u, v in edges}
        id_bound = bound

    return Graph(
        ids=ids,
        edges=frozenset(edges),
        id_bound=id_bound,
        provenance=(kind, tuple(sorted(dict(params).items())), seed),
    )


def _need_int(p: dict, key: str, minimum: int) -> int:
    if key not in p:
        raise ValueError(f"missing param {key!r}")
    v = int(p.pop(key))
    if v < minimum:
        raise ValueError(f"param {key}={v} below minimum {minimum}")
    return v


def _seeded_shuffle(items: list, seed: int, tag: int) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = coin_below(seed, i + 1, 97, tag, i)
        out[i], out[j] = out[j], out[i]
    return out


# ---------------------------------------------------------------------------
# Text file format: header `n m id_bound label_len`, then the ids line,
# then m lines `u v [labels...]`.


def graph_to_text(g: Graph) -> str:
    lines = [f"{g.n} {g.m} {g.id_bound} {g.label_len}"]
    lines.append(" ".join(str(v) for v in g.ids))
    for u, v in g.sorted_edges():
        lab = ()
        if g.edge_labels:
            lab = g.edge_labels.get((u, v), ())
        lines.append(" ".join(str(x) for x in (u, v) + tuple(lab)))
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> Graph:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty graph file")
    n, m, id_bound, label_len = (int(x) for x in lines[0].split())
    ids = tuple(int(x) for x in lines[1].split()) if n else ()
    if len(ids) != n:
        raise ValueError("id count mismatch")
    edges = set()
    edge_labels: dict[tuple[int, int], tuple[int, ...]] = {}
    for ln in lines[2 : 2 + m]:
        parts = [int(x) for x in ln.split()]
        u, v = parts[0], parts[1]
        key = (min(u, v), max(u, v))
        edges.add(key)
        if label_len:
            lab = tuple(parts[2 : 2 + label_len])
            if len(lab) != label_len:
                raise ValueError("edge label length mismatch")
            edge_labels[key] = lab
    if len(edges) != m:
        raise ValueError("edge count mismatch")
    return Graph(
        ids=ids,
        edges=frozenset(edges),
        id_bound=id_bound,
        edge_labels=edge_labels or None,
        label_len=label_len,
    )
