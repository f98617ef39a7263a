"""Prototype-guided node scoring and Top-K pooled-graph generation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph
from .layers import ContextualBlock, Module, Topology, contextual_embed, glorot, zeros
from .structure import PrototypeSet, restrict_prototypes


@dataclass
class LayerState:
    """Hidden matrix, adjacency and prototypes of a (batch of) pooled graph(s).

    Several graphs are held as one block-diagonal system; ``graph_ids`` says
    which graph each row belongs to, and rows of one graph are contiguous.
    """

    H: Tensor
    adjacency: sp.csr_matrix
    prototypes: dict[str, PrototypeSet]
    orig_ids: np.ndarray
    graph_ids: np.ndarray = None
    num_graphs: int = 1
    _topology: Topology | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.H.shape[0]
        if self.graph_ids is None:
            self.graph_ids = np.zeros(n, dtype=np.int64)
        if self.adjacency.shape != (n, n):
            raise ad.DimensionError(f"adjacency {self.adjacency.shape} for {n} rows")

    @property
    def num_nodes(self) -> int:
        return self.H.shape[0]

    @property
    def topology(self) -> Topology:
        if self._topology is None:
            self._topology = Topology(self.adjacency)
        return self._topology

    @classmethod
    def from_graph(cls, graph: Graph, prototypes: Mapping[str, PrototypeSet], H: Tensor | None = None) -> "LayerState":
        return cls.from_graphs([graph], [prototypes], H)

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], prototypes: Sequence[Mapping[str, PrototypeSet]],
                    H: Tensor | None = None) -> "LayerState":
        sizes = [g.num_nodes for g in graphs]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        adj = sp.block_diag([g.adjacency() for g in graphs], format="csr") if graphs else sp.csr_matrix((0, 0))
        kinds = sorted({k for p in prototypes for k in p})
        merged = {}
        for k in kinds:
            sets = [tuple(int(v) + int(offsets[i]) for v in s)
                    for i, p in enumerate(prototypes) if k in p for s in p[k].sets]
            merged[k] = PrototypeSet.build(k, sets)
        if H is None:
            H = Tensor(np.vstack([g.features for g in graphs]))
        graph_ids = np.repeat(np.arange(len(graphs)), sizes)
        orig = np.concatenate([np.arange(n) for n in sizes]) if graphs else np.zeros(0, dtype=np.int64)
        return cls(H, adj, merged, orig.astype(np.int64), graph_ids.astype(np.int64), len(graphs))


@dataclass
class ScoreBreakdown:
    prototype_score: np.ndarray
    aux_score: np.ndarray
    total: np.ndarray
    orig_ids: np.ndarray
    graph_ids: np.ndarray
    kept: np.ndarray


class SpgpLayer(Module):
    _fields = ("contextual", "W_node", "b_node", "W_s", "b_s", "W_aux")

    def __init__(self, d: int, kinds: Sequence[str], rng: np.random.Generator,
                 lam: float = 0.8, ratio: float = 0.8):
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not 0.0 < ratio <= 1.0:
            raise ValueError("pooling ratio must be in (0, 1]")
        self.d = d
        self.kinds = tuple(kinds)
        self.lam = lam
        self.ratio = ratio
        self.contextual = ContextualBlock(d, rng)
        self.W_node = glorot(rng, d, 1)
        self.b_node = zeros((1,))
        self.W_s = {k: glorot(rng, 2 * d, 1) for k in self.kinds}
        self.b_s = {k: zeros((1,)) for k in self.kinds}
        self.W_aux = glorot(rng, d, d)


# ----------------------------------------------------------------- scoring


def _membership(ps: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    nodes = np.fromiter((v for s in ps.sets for v in s), dtype=np.int64)
    set_ids = np.repeat(np.arange(len(ps.sets)), [len(s) for s in ps.sets]).astype(np.int64)
    return nodes, set_ids


def prototype_vectors(Ht: Tensor, ps: PrototypeSet) -> Tensor:
    """Element-wise max of member rows, one row per set: shape (num_sets, d)."""
    if any(len(s) == 0 for s in ps.sets):
        raise ValueError("prototype set is empty")
    nodes, set_ids = _membership(ps)
    return ad.segment_max(ad.row_gather(Ht, nodes), set_ids, len(ps.sets))


def relation_module(W_s: Tensor, b_s: Tensor, Z: Tensor, ps: PrototypeSet, Ht: Tensor) -> Tensor:
    """Affinity of each node with the prototype vectors of the sets containing it.

    Returns (n, 1); rows of nodes outside every set are exactly zero.
    """
    n = Ht.shape[0]
    if not ps.sets:
        return Tensor(np.zeros((n, 1)))
    nodes, set_ids = _membership(ps)
    zsum = ad.segment_sum(ad.row_gather(Z, set_ids), nodes, n)
    member = np.zeros((n, 1))
    member[nodes] = 1.0
    return ad.mul(ad.matmul(ad.concat([zsum, Ht], axis=1), W_s) + b_s, member)


def prototype_score(layer: SpgpLayer, Ht: Tensor, prototypes: Mapping[str, PrototypeSet],
                    parts: dict | None = None) -> Tensor:
    """Sum of per-kind relation outputs plus the node's own linear term, (n, 1)."""
    score = ad.matmul(Ht, layer.W_node) + layer.b_node
    for kind in layer.kinds:
        ps = prototypes.get(kind, PrototypeSet(kind))
        if not ps.sets:
            q = Tensor(np.zeros((Ht.shape[0], 1)))
        else:
            q = relation_module(layer.W_s[kind], layer.b_s[kind], prototype_vectors(Ht, ps), ps, Ht)
        if parts is not None:
            parts[kind] = q
        score = score + q
    return score


def aux_score(Ht: Tensor, adj, W_aux: Tensor) -> Tensor:
    """L1 gap between a node and the projected sum of its direct neighbours, (n, 1)."""
    binary = adj.binary if isinstance(adj, Topology) else Topology(sp.csr_matrix(adj)).binary
    neigh = ad.spmm(binary, ad.matmul(Ht, W_aux))
    return ad.l1_norm(Ht - neigh)


def total_score(proto: Tensor, aux: Tensor, lam: float) -> Tensor:
    return ad.sigmoid(proto + ad.mul(aux, lam))


# ----------------------------------------------------------------- pooling


def pooled_size(n: int, ratio: float) -> int:
    """ceil(ratio * n), robust to binary rounding of ratios like 0.1 or 0.7."""
    if n <= 0:
        raise ValueError("cannot pool an empty graph")
    return max(1, math.ceil(round(ratio * n, 9)))


def topk_indices(scores: np.ndarray, graph_ids: np.ndarray, num_graphs: int, ratio: float) -> np.ndarray:
    """Per-graph Top-K row indices, ascending; ties go to the lower index."""
    scores = np.asarray(scores).reshape(-1)
    n = scores.shape[0]
    if n == 0:
        raise ValueError("cannot pool an empty graph")
    counts = np.bincount(graph_ids, minlength=num_graphs)
    k = np.array([pooled_size(c, ratio) if c else 0 for c in counts])
    order = np.lexsort((np.arange(n), -scores, graph_ids))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - starts[graph_ids[order]]
    return np.flatnonzero(rank < k[graph_ids])


def pool_topk(state: LayerState, scores: Tensor, ratio: float, idx: np.ndarray | None = None) -> LayerState:
    """Keep the top-scoring nodes, scale their rows by the score, slice A."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("pooling ratio must be in (0, 1]")
    if idx is None:
        idx = topk_indices(scores.data, state.graph_ids, state.num_graphs, ratio)
    H = ad.mul(ad.row_gather(state.H, idx), ad.row_gather(scores, idx))
    adj = state.adjacency[idx][:, idx].tocsr()
    lut = np.full(state.num_nodes, -1, dtype=np.int64)
    lut[idx] = np.arange(len(idx))
    protos = {k: restrict_prototypes(ps, lut) for k, ps in state.prototypes.items()}
    return LayerState(H, adj, protos, state.orig_ids[idx], state.graph_ids[idx], state.num_graphs)


def spgp_forward(layer: SpgpLayer, state: LayerState, detach_scores: bool = False) -> tuple[LayerState, ScoreBreakdown]:
    topo = state.topology
    Ht = contextual_embed(layer.contextual, state.H, topo)
    proto = prototype_score(layer, Ht, state.prototypes)
    aux = aux_score(Ht, topo, layer.W_aux)
    logit = proto + ad.mul(aux, layer.lam)
    phi = ad.sigmoid(logit)
    if detach_scores:
        phi = phi.detach()
    # rank on the sigmoid's argument: same order, but no ties where phi rounds to 1.0
    idx = topk_indices(logit.data, state.graph_ids, state.num_graphs, layer.ratio)
    pooled = pool_topk(state, phi, layer.ratio, idx)
    kept = np.zeros(state.num_nodes, dtype=bool)
    kept[idx] = True
    breakdown = ScoreBreakdown(
        prototype_score=proto.data.reshape(-1).copy(),
        aux_score=aux.data.reshape(-1).copy(),
        total=phi.data.reshape(-1).copy(),
        orig_ids=state.orig_ids.copy(),
        graph_ids=state.graph_ids.copy(),
        kept=kept,
    )
    return pooled, breakdown


def write_scores_csv(path: str | Path, breakdowns: Sequence[ScoreBreakdown], graph_offset: int = 0) -> None:
    """CSV ``graph_idx,node_orig_id,prototype_score,aux_score,total``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_idx", "node_orig_id", "prototype_score", "aux_score", "total"])
        for b in breakdowns:
            for g, o, p, a, t in zip(b.graph_ids, b.orig_ids, b.prototype_score, b.aux_score, b.total):
                w.writerow([int(g) + graph_offset, int(o), repr(float(p)), repr(float(a)), repr(float(t))])


# -------------------------------------------------------------- complexity

SPGP = "spgp"
STRUCTURE_LEARNING = "structure_learning_baseline"


def complexity_report(n: int, d: int, s: int = 1, method: str = SPGP) -> tuple[int, int]:
    """Dominant-term (time_ops, space_units) of the scoring path.

    Prototype scoring touches each (kind, node, feature) once and stores one
    d-vector per node; a dense structure-learning refinement scores all node
    pairs on d features and stores the n x n matrix.
    """
    if min(n, d, s) <= 0:
        raise ValueError("n, d and s must be positive")
    if method == SPGP:
        return s * d * n, d * n
    if method == STRUCTURE_LEARNING:
        return d * n * n, n * n
    raise ValueError(f"unknown method {method!r}")


def complexity_table(ns: Sequence[int], d: int = 64, s: int = 2) -> list[dict]:
    """One row per (method, n) with both counters."""
    rows = []
    for method in (SPGP, STRUCTURE_LEARNING):
        for n in ns:
            t, m = complexity_report(int(n), d, s, method)
            rows.append({"method": method, "n": int(n), "d": d, "s": s, "time_ops": t, "space_units": m})
    return rows


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def write_complexity_csv(path: str | Path, rows: Sequence[dict]) -> None:
    fields = ["method", "n", "d", "s", "time_ops", "space_units"]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
