"""Structure prototypes: biconnected components and merged cliques."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .graph import Dataset, Graph

BCC = "bcc"
CLIQUE = "clique"
KINDS = (BCC, CLIQUE)

MIN_SET_SIZE = 3


@dataclass(frozen=True)
class PrototypeSet:
    """One family of node subsets of a graph.

    ``sets`` is a tuple of strictly increasing index tuples, deduplicated and
    sorted lexicographically.
    """

    kind: str
    sets: tuple[tuple[int, ...], ...] = ()

    @classmethod
    def build(cls, kind: str, sets: Iterable[Iterable[int]]) -> "PrototypeSet":
        canon = {tuple(sorted({int(v) for v in s})) for s in sets}
        canon.discard(())
        return cls(kind, tuple(sorted(canon)))

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def membership(self, num_nodes: int) -> np.ndarray:
        """Count of sets containing each node."""
        c = np.zeros(num_nodes, dtype=np.int64)
        for s in self.sets:
            c[list(s)] += 1
        return c

    def relabel(self, perm: Sequence[int]) -> "PrototypeSet":
        perm = np.asarray(perm)
        return PrototypeSet.build(self.kind, (perm[list(s)] for s in self.sets))


@dataclass(frozen=True)
class StructureStats:
    fraction_graphs_with_any: float
    mean_sets_per_graph: float
    mean_set_size: float
    extraction_time_total: float
    extraction_time_per_graph: float


# ------------------------------------------------------------------------ BCC


def biconnected_components(graph: Graph) -> list[set[int]]:
    """All biconnected components as node sets (bridges included).

    Iterative Hopcroft-Tarjan DFS with an edge stack; O(|V| + |E|).
    """
    n = graph.num_nodes
    adj = graph.adjacency_lists()
    disc = [-1] * n
    low = [0] * n
    comps: list[set[int]] = []
    t = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = t
        t += 1
        edge_stack: list[tuple[int, int]] = []
        # frames: (node, parent, next neighbor position)
        stack = [[root, -1, 0]]
        while stack:
            frame = stack[-1]
            u, parent, i = frame
            nbrs = adj[u]
            if i < len(nbrs):
                frame[2] += 1
                w = nbrs[i]
                if disc[w] == -1:
                    disc[w] = low[w] = t
                    t += 1
                    edge_stack.append((u, w))
                    stack.append([w, u, 0])
                elif w != parent and disc[w] < disc[u]:
                    edge_stack.append((u, w))
                    if disc[w] < low[u]:
                        low[u] = disc[w]
                continue
            stack.pop()
            if parent == -1:
                continue
            if low[u] < low[parent]:
                low[parent] = low[u]
            if low[u] >= disc[parent]:
                comp: set[int] = set()
                while True:
                    a, b = edge_stack.pop()
                    comp.add(a)
                    comp.add(b)
                    if (a, b) == (parent, u):
                        break
                comps.append(comp)
    return comps


def extract_bcc(graph: Graph) -> PrototypeSet:
    """Biconnected components with at least three nodes."""
    return PrototypeSet.build(
        BCC, (c for c in biconnected_components(graph) if len(c) >= MIN_SET_SIZE)
    )


# -------------------------------------------------------------------- cliques


def maximal_cliques(adj: Mapping[int, set[int]]) -> list[frozenset[int]]:
    """Bron-Kerbosch enumeration with Tomita pivoting."""
    out: list[frozenset[int]] = []

    def expand(r: list[int], p: set[int], x: set[int]) -> None:
        if not p and not x:
            out.append(frozenset(r))
            return
        pivot = max(p | x, key=lambda u: (len(p & adj[u]), -u))
        for v in sorted(p - adj[pivot]):
            nv = adj[v]
            r.append(v)
            expand(r, p & nv, x & nv)
            r.pop()
            p.discard(v)
            x.add(v)

    nodes = set(adj)
    expand([], set(nodes), set())
    return out


def merge_overlapping(sets: Iterable[Iterable[int]]) -> list[tuple[int, ...]]:
    """Union sets sharing more than half of the smaller one, to a fixpoint.

    Each round finds every qualifying pair among the current sets and unions
    each connected group of pairs at once.  Rounds repeat until no pair
    qualifies.  Nothing depends on node labels or input order, so relabeling
    the graph relabels the output.
    """
    cur = sorted({tuple(sorted(s)) for s in sets})
    while True:
        index: dict[int, list[int]] = {}
        for i, s in enumerate(cur):
            for v in s:
                index.setdefault(v, []).append(i)
        rows, cols = [], []
        for i, a in enumerate(cur):
            for j in sorted({j for v in a for j in index[v] if j > i}):
                b = cur[j]
                if 2 * len(set(a).intersection(b)) > min(len(a), len(b)):
                    rows.append(i)
                    cols.append(j)
        if not rows:
            return cur
        pairs = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(cur), len(cur)))
        _, comp = connected_components(pairs, directed=False)
        groups: dict[int, set[int]] = {}
        for i, c in enumerate(comp):
            groups.setdefault(int(c), set()).update(cur[i])
        cur = sorted({tuple(sorted(g)) for g in groups.values()})


def raw_cliques(graph: Graph, per_bcc: bool = True) -> list[tuple[int, ...]]:
    """Maximal cliques with at least three nodes, before merging.

    Every such clique is 2-connected and therefore lies inside exactly one
    biconnected component, so searching per component is exact.
    """
    adj_lists = graph.adjacency_lists()
    if per_bcc:
        regions = [c for c in biconnected_components(graph) if len(c) >= MIN_SET_SIZE]
    else:
        regions = [set(range(graph.num_nodes))]
    found: set[tuple[int, ...]] = set()
    for region in regions:
        adj = {v: set(adj_lists[v]) & region for v in region}
        for c in maximal_cliques(adj):
            if len(c) >= MIN_SET_SIZE:
                found.add(tuple(sorted(c)))
    return sorted(found)


def extract_cliques(graph: Graph, merge: bool = True) -> PrototypeSet:
    """Maximal cliques (size >= 3), merged when they overlap by more than half."""
    cliques = raw_cliques(graph)
    if merge:
        cliques = merge_overlapping(cliques)
    return PrototypeSet.build(CLIQUE, cliques)


EXTRACTORS = {BCC: extract_bcc, CLIQUE: extract_cliques}


def extract_all(graph: Graph, kinds: Sequence[str] = KINDS) -> dict[str, PrototypeSet]:
    return {k: EXTRACTORS[k](graph) for k in kinds}


def structure_stats(dataset: Dataset, kinds: Sequence[str] = KINDS) -> StructureStats:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    with_any = 0
    n_sets = 0
    size_total = 0
    start = time.perf_counter()
    for g in dataset.graphs:
        protos = extract_all(g, kinds)
        sets = [s for ps in protos.values() for s in ps.sets]
        with_any += bool(sets)
        n_sets += len(sets)
        size_total += sum(len(s) for s in sets)
    elapsed = time.perf_counter() - start
    return StructureStats(
        fraction_graphs_with_any=with_any / len(dataset),
        mean_sets_per_graph=n_sets / len(dataset),
        mean_set_size=size_total / n_sets if n_sets else 0.0,
        extraction_time_total=elapsed,
        extraction_time_per_graph=elapsed / len(dataset),
    )


# --------------------------------------------------------------- augmentation


def structure_features(num_nodes: int, bcc: PrototypeSet, cq: PrototypeSet) -> np.ndarray:
    """Per-node (relative BCC size, relative clique size, clique share) columns."""
    out = np.zeros((num_nodes, 3))
    for col, ps in ((0, bcc), (1, cq)):
        if len(ps):
            biggest = max(len(s) for s in ps.sets)
            for s in ps.sets:
                idx = list(s)
                out[idx, col] = np.maximum(out[idx, col], len(s) / biggest)
    if len(cq):
        out[:, 2] = cq.membership(num_nodes) / len(cq)
    return out


def augment_features(graph: Graph, bcc: PrototypeSet, cq: PrototypeSet) -> Graph:
    """Append the three structure columns to the node features."""
    extra = structure_features(graph.num_nodes, bcc, cq)
    return graph.with_features(np.hstack([graph.features, extra]))


def restrict_prototypes(ps: PrototypeSet, surviving: Mapping[int, int] | np.ndarray) -> PrototypeSet:
    """Map sets onto the surviving nodes, dropping only empty results.

    ``surviving`` maps old index to new index; an array uses -1 for dropped
    nodes.  Small sets are kept on purpose so that nodes isolated by pooling
    keep their membership.
    """
    if isinstance(surviving, np.ndarray):
        lut = surviving
        out = []
        for s in ps.sets:
            m = lut[list(s)]
            m = m[m >= 0]
            if m.size:
                out.append(m.tolist())
    else:
        out = [[surviving[v] for v in s if v in surviving] for s in ps.sets]
        out = [s for s in out if s]
    return PrototypeSet.build(ps.kind, out)


# ---------------------------------------------------------------------- cache


def write_prototype_cache(path: str | Path, protos: Sequence[Mapping[str, PrototypeSet]]) -> None:
    lines = []
    for gi, per_kind in enumerate(protos):
        for kind in sorted(per_kind):
            for s in per_kind[kind].sets:
                lines.append(f"{gi} {kind} " + " ".join(map(str, s)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_prototype_cache(
    path: str | Path, num_graphs: int, kinds: Sequence[str] = KINDS
) -> list[dict[str, PrototypeSet]]:
    """Inverse of :func:`write_prototype_cache`; graphs without lines get empty sets."""
    raw: list[dict[str, list[list[int]]]] = [{k: [] for k in kinds} for _ in range(num_graphs)]
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                gi, kind, nodes = int(parts[0]), parts[1], [int(t) for t in parts[2:]]
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed cache line") from None
            if not 0 <= gi < num_graphs:
                raise ValueError(f"{path}:{lineno}: graph index {gi} out of range")
            if kind in raw[gi]:
                raw[gi][kind].append(nodes)
    return [{k: PrototypeSet.build(k, v) for k, v in d.items()} for d in raw]
