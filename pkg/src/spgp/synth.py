"""Random graph generators, the k-hop baseline scorer and synthetic experiments."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Dataset, Graph
from .layers import GcnLayer, gcn_forward
from .pooling import LayerState, SpgpLayer, spgp_forward
from .structure import CLIQUE, KINDS, PrototypeSet, extract_all

ER_MEAN_DEGREE = 2.16


@dataclass(frozen=True)
class GenSpec:
    model: str  # "er", "ba" or "regular"
    n: int
    param: float
    seed: int = 0

    def generate(self, seed: int | None = None) -> Graph:
        s = self.seed if seed is None else seed
        if self.model == "er":
            return gen_er(self.n, self.param, s)
        if self.model == "ba":
            return gen_ba(self.n, int(self.param), s)
        if self.model == "regular":
            return gen_regular(self.n, int(self.param), s)
        raise ValueError(f"unknown model {self.model!r}")


@dataclass(frozen=True)
class DiversityResult:
    rewire_fraction: float
    mean_score_std: dict
    num_graphs: int


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@lru_cache(maxsize=8)
def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(n, k=1)
    return iu[0].astype(np.int64), iu[1].astype(np.int64)


def gen_er(n: int, mean_degree: float = ER_MEAN_DEGREE, seed=0, dim: int = 1) -> Graph:
    """G(n, p) with p = mean_degree / n."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if mean_degree < 0:
        raise ValueError("mean degree must be non-negative")
    p = mean_degree / n
    if p > 1:
        raise ValueError(f"edge probability {p} exceeds 1")
    rng = _rng(seed)
    u, v = _pairs(n)
    hit = rng.random(u.shape[0]) < p
    return Graph.from_edges(n, np.stack([u[hit], v[hit]], axis=1), np.ones((n, dim)))


def gen_ba(n: int, m: int = 2, seed=0, dim: int = 1) -> Graph:
    """Preferential attachment grown from a complete graph on m+1 nodes."""
    if not 1 <= m < n:
        raise ValueError(f"need 1 <= m < n, got m={m}, n={n}")
    rng = _rng(seed)
    edges = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    # each node appears once per incident edge
    ends = [v for e in edges for v in e]
    for new in range(m + 1, n):
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(ends[rng.integers(len(ends))])
        for t in sorted(targets):
            edges.append((t, new))
            ends.extend((t, new))
    return Graph.from_edges(n, edges, np.ones((n, dim)))


def gen_regular(n: int, k: int, seed=0, dim: int = 1, max_restarts: int = 1000) -> Graph:
    """Uniform-ish random k-regular simple graph by stub pairing.

    Stubs are paired at random; pairs that would form a loop or repeat an
    edge are rejected and their stubs re-pooled.  A dead end restarts.
    """
    if k >= n or k < 0:
        raise ValueError(f"need 0 <= k < n, got k={k}, n={n}")
    if (k * n) % 2:
        raise ValueError(f"k*n must be even, got k={k}, n={n}")
    rng = _rng(seed)
    if k == n - 1:
        u, v = _pairs(n)
        return Graph.from_edges(n, np.stack([u, v], axis=1), np.ones((n, dim)))
    for _ in range(max_restarts):
        edges: set[tuple[int, int]] = set()
        stubs = np.repeat(np.arange(n), k)
        ok = True
        while stubs.size:
            rng.shuffle(stubs)
            left = []
            for a, b in zip(stubs[0::2], stubs[1::2]):
                e = (a, b) if a < b else (b, a)
                if a == b or e in edges:
                    left.extend((a, b))
                else:
                    edges.add((int(e[0]), int(e[1])))
            if len(left) == stubs.size:
                # no progress: check whether any pair is still feasible
                rest = np.array(left)
                feasible = any(
                    x != y and ((x, y) if x < y else (y, x)) not in edges
                    for i, x in enumerate(rest) for y in rest[i + 1:]
                )
                if not feasible:
                    ok = False
                    break
            stubs = np.array(left, dtype=np.int64)
        if ok:
            return Graph.from_edges(n, sorted(edges), np.ones((n, dim)))
    raise RuntimeError("failed to build a regular graph")


def rewire_edges(graph: Graph, fraction: float, seed=0) -> Graph:
    """Replace floor(fraction*|E|) random edges by random absent pairs."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    rng = _rng(seed)
    n = graph.num_nodes
    edges = [tuple(map(int, e)) for e in graph.edges]
    steps = int(np.floor(fraction * len(edges) + 1e-9))
    if steps == 0:
        return graph
    if len(edges) == n * (n - 1) // 2:
        raise ValueError("graph is complete: no absent pair to rewire into")
    present = set(edges)
    for _ in range(steps):
        i = int(rng.integers(len(edges)))
        present.discard(edges[i])
        edges[i] = edges[-1]
        edges.pop()
        while True:
            a, b = (int(x) for x in rng.integers(n, size=2))
            if a == b:
                continue
            e = (a, b) if a < b else (b, a)
            if e not in present:
                break
        present.add(e)
        edges.append(e)
    return Graph.from_edges(n, sorted(present), graph.features, graph.label,
                            None)


# ----------------------------------------------------------- baseline scorer


class BaselineScorer:
    """Single GCN layer with a scalar output, squashed by a sigmoid."""

    def __init__(self, d_in: int, rng):
        self.gcn = GcnLayer(d_in, 1, _rng(rng))

    def __call__(self, graph: Graph, H: Tensor | None = None) -> np.ndarray:
        H = Tensor(graph.features) if H is None else H
        return ad.sigmoid(gcn_forward(self.gcn, H, graph)).data.reshape(-1)


def baseline_khop_score(graph: Graph, H: np.ndarray | Tensor | None = None, seed=0,
                        scorer: BaselineScorer | None = None) -> np.ndarray:
    H = Tensor(graph.features if H is None else ad.as_tensor(H).data)
    scorer = scorer or BaselineScorer(H.shape[1], seed)
    return scorer(graph, H)


def spgp_scores(layer: SpgpLayer, graph: Graph, prototypes, H: np.ndarray | None = None) -> np.ndarray:
    """Untrained total node scores of one graph."""
    feats = graph.features if H is None else H
    state = LayerState.from_graph(graph, prototypes, Tensor(feats))
    _, breakdown = spgp_forward(layer, state)
    return breakdown.total


# ------------------------------------------------------------ experiments


def ensure_prototype(graph: Graph, prototypes: dict[str, PrototypeSet], rng) -> dict[str, PrototypeSet]:
    """Guarantee one prototype set that covers a strict, nonempty node subset.

    If extraction found none, a clique prototype is planted on three random
    nodes (membership only; the edges are left alone so regularity holds).
    """
    n = graph.num_nodes
    if any(0 < len(s) < n for ps in prototypes.values() for s in ps.sets):
        return prototypes
    nodes = _rng(rng).choice(n, size=3, replace=False)
    out = dict(prototypes)
    out[CLIQUE] = PrototypeSet.build(CLIQUE, list(out.get(CLIQUE, PrototypeSet(CLIQUE)).sets) + [nodes])
    return out


def diversity_experiment(spec: GenSpec, fractions: Sequence[float], num_graphs: int = 100,
                         seed: int = 0, hidden_dim: int = 16, kinds: Sequence[str] = KINDS,
                         lam: float = 0.0, return_per_graph: bool = False):
    """Mean (over graphs) population std of node scores, per rewiring fraction.

    Both scorers use one fixed random initialisation; node features are all
    ones so only structure can separate nodes.
    """
    if spec.model != "regular":
        raise ValueError("diversity experiment expects a regular-graph spec")
    rng = np.random.default_rng(seed)
    layer = SpgpLayer(hidden_dim, kinds, rng, lam=lam, ratio=1.0)
    scorer = BaselineScorer(hidden_dim, rng)
    base_graphs = [spec.generate(seed=[spec.seed, i]) for i in range(num_graphs)]
    H = np.ones((spec.n, hidden_dim))
    results, per_graph = [], []
    for fraction in fractions:
        spgp_std, base_std = [], []
        for i, g0 in enumerate(base_graphs):
            g = rewire_edges(g0, fraction, seed=[spec.seed, i, int(round(fraction * 1e6))])
            protos = ensure_prototype(g, extract_all(g, kinds), [seed, i])
            spgp_std.append(float(np.std(spgp_scores(layer, g, protos, H))))
            base_std.append(float(np.std(scorer(g, Tensor(H)))))
        per_graph.append({"fraction": fraction, "spgp": spgp_std, "baseline": base_std})
        results.append(DiversityResult(
            rewire_fraction=float(fraction),
            mean_score_std={"spgp": float(np.mean(spgp_std)), "baseline": float(np.mean(base_std))},
            num_graphs=num_graphs,
        ))
    return (results, per_graph) if return_per_graph else results


def write_diversity_csv(path: str | Path, results: Sequence[DiversityResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "method", "mean_score_std", "num_graphs"])
        for r in results:
            for method, v in r.mean_score_std.items():
                w.writerow([r.rewire_fraction, method, repr(v), r.num_graphs])


def planted_motif_task(num_graphs: int = 200, n: int = 30, seed: int = 0,
                       motif_size: int = 5, mean_degree: float = ER_MEAN_DEGREE) -> Dataset:
    """Balanced two-class task: ER background with or without a planted clique.

    Class 1 receives a clique on ``motif_size`` random nodes.  Class 0 draws
    the same kind of node sample, counts how many of its pairs are absent,
    and adds that many uniformly random absent edges instead, so both classes
    gain the same number of edges.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(num_graphs)])
    rng.shuffle(labels)
    graphs = []
    for label in labels:
        g = gen_er(n, mean_degree, rng)
        present = {tuple(map(int, e)) for e in g.edges}
        nodes = sorted(int(v) for v in rng.choice(n, size=motif_size, replace=False))
        clique = {(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]}
        missing = clique - present
        if label == 1:
            present |= missing
        else:
            added = 0
            while added < len(missing):
                a, b = (int(x) for x in rng.integers(n, size=2))
                e = (min(a, b), max(a, b))
                if a != b and e not in present:
                    present.add(e)
                    added += 1
        graphs.append(Graph.from_edges(n, sorted(present), np.ones((n, 1)), int(label)))
    return Dataset(tuple(graphs), 2, "planted_motif")
