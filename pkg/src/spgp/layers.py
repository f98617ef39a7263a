"""Graph convolution, contextual embedding, readout and the classifier head."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter holder; subclasses list child modules/params in ``_fields``."""

    _fields: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in self._fields:
            obj = getattr(self, name)
            key = f"{prefix}{name}"
            if isinstance(obj, Tensor):
                out[key] = obj
            elif isinstance(obj, Module):
                out.update(obj.named_parameters(key + "."))
            elif isinstance(obj, dict):
                for k, v in obj.items():
                    if isinstance(v, Tensor):
                        out[f"{key}.{k}"] = v
                    else:
                        out.update(v.named_parameters(f"{key}.{k}."))
            elif isinstance(obj, list):
                for i, v in enumerate(obj):
                    out.update(v.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name)


def zeros(shape, name: str | None = None) -> Tensor:
    return ad.parameter(np.zeros(shape), name)


class Linear(Module):
    _fields = ("weight", "bias")

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = glorot(rng, d_in, d_out)
        self.bias = zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


# ------------------------------------------------------------------ topology


def _with_self_loops(adj: sp.spmatrix) -> sp.csr_matrix:
    n = adj.shape[0]
    a = sp.csr_matrix(adj, dtype=np.float64, copy=True)
    a.setdiag(0.0)
    a.eliminate_zeros()
    return (a + sp.identity(n, format="csr")).tocsr()


def sym_normalize(adj: sp.spmatrix) -> sp.csr_matrix:
    """Self-loop ``adj`` and scale entry (v, u) by 1/sqrt(|N(u)| |N(v)|).

    Neighbourhood sizes count nodes (self included), not weights; the entry
    itself keeps its edge weight (1 on the diagonal).
    """
    a = _with_self_loops(adj)
    counts = np.diff(a.indptr).astype(np.float64)
    inv = 1.0 / np.sqrt(counts)
    d = sp.diags(inv)
    return (d @ a @ d).tocsr()


def exact_two_hop(adj: sp.spmatrix) -> sp.csr_matrix:
    """Binary matrix of node pairs at shortest-path distance exactly 2."""
    n = adj.shape[0]
    b = sp.csr_matrix(adj, dtype=np.float64, copy=True)
    b.data[:] = 1.0
    b.setdiag(0.0)
    b.eliminate_zeros()
    within1 = b + sp.identity(n, format="csr")
    reach2 = within1 @ within1
    reach2.data[:] = 1.0
    two = (reach2 - within1).tocsr()
    two.data = (two.data > 0.5).astype(np.float64)
    two.eliminate_zeros()
    return two


@dataclass
class Topology:
    """Constant propagation operators derived from one (block-diagonal) adjacency."""

    adj: sp.csr_matrix

    @cached_property
    def direct(self) -> sp.csr_matrix:
        return sym_normalize(self.adj)

    @cached_property
    def context(self) -> sp.csr_matrix:
        return sym_normalize(exact_two_hop(self.adj))

    @cached_property
    def binary(self) -> sp.csr_matrix:
        b = sp.csr_matrix(self.adj, dtype=np.float64, copy=True)
        b.data[:] = 1.0
        return b


def _topology(adj) -> Topology:
    if isinstance(adj, Topology):
        return adj
    if hasattr(adj, "adjacency") and callable(adj.adjacency):
        return Topology(adj.adjacency())
    return Topology(sp.csr_matrix(adj))


# -------------------------------------------------------------------- layers


class GcnLayer(Module):
    _fields = ("weight", "bias")

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = glorot(rng, d_in, d_out)
        self.bias = zeros((d_out,))


def gcn_forward(layer: GcnLayer, H: Tensor, adj) -> Tensor:
    """Symmetric-normalised aggregation over self-looped neighbourhoods.

    ``adj`` is a :class:`Topology`, a :class:`~spgp.graph.Graph`, or a sparse
    adjacency without self-loops.
    """
    topo = _topology(adj)
    if H.shape[0] != topo.adj.shape[0]:
        raise ad.DimensionError(f"gcn_forward: {H.shape[0]} feature rows for {topo.adj.shape[0]} nodes")
    if H.shape[1] != layer.weight.shape[0]:
        raise ad.DimensionError(f"gcn_forward: input dim {H.shape[1]} != weight rows {layer.weight.shape[0]}")
    return ad.spmm(topo.direct, ad.matmul(H, layer.weight)) + layer.bias


class ContextualBlock(Module):
    """Residual mix of direct-neighbour and two-hop context aggregations."""

    _fields = ("W", "b", "W_t", "W_c")

    def __init__(self, d: int, rng: np.random.Generator):
        self.W = glorot(rng, 2 * d, d)
        self.b = zeros((d,))
        self.W_t = glorot(rng, d, d)
        self.W_c = glorot(rng, d, d)


def contextual_embed(block: ContextualBlock, H: Tensor, adj) -> Tensor:
    topo = _topology(adj)
    if H.shape[0] != topo.adj.shape[0] or H.shape[1] != block.W_t.shape[0]:
        raise ad.DimensionError(f"contextual_embed: H {H.shape} incompatible with block/graph")
    t = ad.spmm(topo.direct, ad.matmul(H, block.W_t))
    c = ad.spmm(topo.context, ad.matmul(H, block.W_c))
    mixed = ad.matmul(ad.concat([t, c], axis=1), block.W) + block.b
    return H + ad.leaky_relu(mixed)


def readout(H: Tensor, graph_ids: np.ndarray | None = None, num_graphs: int = 1) -> Tensor:
    """Per-graph mean || max, shape (num_graphs, 2d)."""
    if H.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    if graph_ids is None:
        graph_ids = np.zeros(H.shape[0], dtype=np.int64)
    return ad.concat(
        [ad.segment_mean(H, graph_ids, num_graphs), ad.segment_max(H, graph_ids, num_graphs)], axis=1
    )


class MLPHead(Module):
    _fields = ("hidden", "out")

    def __init__(self, d_in: int, d_hidden: int, num_outputs: int, rng: np.random.Generator):
        self.hidden = Linear(d_in, d_hidden, rng)
        self.out = Linear(d_hidden, num_outputs, rng)

    def __call__(self, HS: Tensor, dropout: float = 0.0, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if HS.ndim == 1:
            HS = ad.reshape(HS, (1, -1))
        if HS.shape[1] != self.hidden.weight.shape[0]:
            raise ad.DimensionError(f"mlp_head: input dim {HS.shape[1]} != {self.hidden.weight.shape[0]}")
        h = ad.relu(self.hidden(HS))
        h = ad.dropout(h, dropout, training, rng)
        return self.out(h)


def mlp_head(head: MLPHead, HS: Tensor, **kw) -> Tensor:
    return head(HS, **kw)
