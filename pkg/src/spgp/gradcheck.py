"""Finite-difference checks for every differentiable primitive and composite.

Each case builder takes a generator and returns ``(f, params)``: ``f()``
rebuilds a scalar from the current parameter values, so central differences
can perturb ``params`` in place.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph
from .layers import ContextualBlock, GcnLayer, MLPHead, contextual_embed, gcn_forward, readout
from .pooling import LayerState, SpgpLayer, aux_score, prototype_score, spgp_forward
from .structure import BCC, CLIQUE, extract_all

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _p(rng, *shape) -> Tensor:
    return ad.parameter(rng.normal(size=shape))


def _proj(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Contract an output with a fixed random tensor so every entry matters."""
    r = rng.normal(size=out.shape)
    return lambda t: ad.sum(ad.mul(t, r))


def _scalar(build: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    contract = _proj(build(), rng)
    return lambda: contract(build())


def _fixture_graph(rng, n: int = 7) -> Graph:
    # a triangle, a 4-cycle sharing node 2, a pendant, plus one random chord
    edges = [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (5, 2), (5, 6)]
    u, v = sorted(rng.choice(n, size=2, replace=False))
    return Graph.from_edges(n, edges + [(int(u), int(v))], edge_weights=None)


def _unary(op) -> Case:
    def case(rng):
        x = _p(rng, 4, 3)
        return _scalar(lambda: op(x), rng), [x]
    return case


def _binary(op, shape_b=(4, 3)) -> Case:
    def case(rng):
        a, b = _p(rng, 4, 3), _p(rng, *shape_b)
        return _scalar(lambda: op(a, b), rng), [a, b]
    return case


def _matmul(rng):
    a, b = _p(rng, 4, 3), _p(rng, 3, 2)
    return _scalar(lambda: ad.matmul(a, b), rng), [a, b]


def _spmm(rng):
    s = sp.random(5, 4, density=0.5, random_state=int(rng.integers(2**31)), format="csr")
    x = _p(rng, 4, 3)
    return _scalar(lambda: ad.spmm(s, x), rng), [x]


def _concat(rng):
    a, b = _p(rng, 4, 2), _p(rng, 4, 3)
    return _scalar(lambda: ad.concat([a, b], axis=1), rng), [a, b]


def _row_gather(rng):
    x = _p(rng, 5, 3)
    idx = np.array([4, 0, 0, 2])
    return _scalar(lambda: ad.row_gather(x, idx), rng), [x]


def _segment(op):
    def case(rng):
        x = _p(rng, 6, 3)
        seg = np.array([0, 2, 0, 1, 2, 2])
        return _scalar(lambda: op(x, seg, 3), rng), [x]
    return case


def _layer_norm(rng):
    x = _p(rng, 4, 5)
    return _scalar(lambda: ad.layer_norm(x), rng), [x]


def _dropout(rng):
    x = _p(rng, 4, 3)
    seed = int(rng.integers(2**31))
    return _scalar(lambda: ad.dropout(x, 0.3, True, np.random.default_rng(seed)), rng), [x]


def _softmax_ce(rng):
    z = _p(rng, 5, 3)
    y = rng.integers(3, size=5)
    return (lambda: ad.softmax_cross_entropy(z, y)), [z]


def _bce(rng):
    z = _p(rng, 4, 3)
    y = (rng.random((4, 3)) < 0.5).astype(float)
    y[1, 2] = np.nan
    return (lambda: ad.binary_cross_entropy_with_logits(z, y)), [z]


def _gcn(rng):
    g = _fixture_graph(rng)
    layer = GcnLayer(3, 2, rng)
    layer.bias.data[:] = rng.normal(size=2)
    H = _p(rng, g.num_nodes, 3)
    return _scalar(lambda: gcn_forward(layer, H, g), rng), [H, *layer.parameters()]


def _contextual(rng):
    g = _fixture_graph(rng)
    block = ContextualBlock(3, rng)
    block.b.data[:] = rng.normal(size=3)
    H = _p(rng, g.num_nodes, 3)
    return _scalar(lambda: contextual_embed(block, H, g), rng), [H, *block.parameters()]


def _readout(rng):
    H = _p(rng, 6, 3)
    ids = np.array([0, 0, 1, 1, 1, 0])
    return _scalar(lambda: readout(H, ids, 2), rng), [H]


def _mlp(rng):
    head = MLPHead(4, 5, 2, rng)
    for p in head.parameters():
        p.data += 0.1 * rng.normal(size=p.shape)
    x = _p(rng, 3, 4)
    return _scalar(lambda: head(x), rng), [x, *head.parameters()]


def _layer(rng, lam: float) -> SpgpLayer:
    layer = SpgpLayer(3, (BCC, CLIQUE), rng, lam=lam, ratio=0.7)
    for p in layer.parameters():
        p.data += 0.3 * rng.normal(size=p.shape)
    return layer


def _proto_score(rng):
    g = _fixture_graph(rng)
    protos = extract_all(g)
    layer = _layer(rng, 0.5)
    Ht = _p(rng, g.num_nodes, 3)
    params = [Ht, layer.W_node, layer.b_node, *layer.W_s.values(), *layer.b_s.values()]
    return _scalar(lambda: prototype_score(layer, Ht, protos), rng), params


def _aux(rng):
    g = _fixture_graph(rng)
    Ht = _p(rng, g.num_nodes, 3)
    W = _p(rng, 3, 3)
    adj = g.adjacency()
    return _scalar(lambda: aux_score(Ht, adj, W), rng), [Ht, W]


def _spgp_forward(rng):
    g = _fixture_graph(rng)
    protos = extract_all(g)
    layer = _layer(rng, 0.05)
    H = _p(rng, g.num_nodes, 3)

    def pooled_h():
        pooled, _ = spgp_forward(layer, LayerState.from_graph(g, protos, H))
        return pooled.H

    contract = _proj(pooled_h(), rng)
    r = rng.normal(size=(1, 6))

    def f():
        # readout of the pooled graph exercises the full pooling path
        Hp = pooled_h()
        return contract(Hp) + ad.sum(ad.mul(readout(Hp), r))

    return f, [H, *layer.parameters()]


CASES: dict[str, Case] = {
    "add": _binary(ad.add),
    "add_broadcast": _binary(ad.add, (3,)),
    "sub": _binary(ad.sub),
    "hadamard": _binary(ad.mul),
    "hadamard_broadcast": _binary(ad.mul, (4, 1)),
    "matmul": _matmul,
    "spmm": _spmm,
    "concat": _concat,
    "reshape": _unary(lambda x: ad.reshape(x, (3, 4))),
    "transpose": _unary(ad.transpose),
    "relu": _unary(ad.relu),
    "leaky_relu": _unary(ad.leaky_relu),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "absolute": _unary(ad.absolute),
    "l1_norm": _unary(ad.l1_norm),
    "sum": _unary(ad.sum),
    "mean": _unary(ad.mean),
    "mean_rows": _unary(ad.mean_rows),
    "max_rows": _unary(ad.max_rows),
    "row_gather": _row_gather,
    "segment_sum": _segment(ad.segment_sum),
    "segment_mean": _segment(ad.segment_mean),
    "segment_max": _segment(ad.segment_max),
    "layer_norm": _layer_norm,
    "dropout": _dropout,
    "softmax_cross_entropy": _softmax_ce,
    "binary_cross_entropy_with_logits": _bce,
    "gcn_forward": _gcn,
    "contextual_embed": _contextual,
    "readout": _readout,
    "mlp_head": _mlp,
    "prototype_score": _proto_score,
    "aux_score": _aux,
    "spgp_forward": _spgp_forward,
}


def check_case(name: str, seed: int, h: float = 1e-5) -> float:
    """Max relative error of one case at one random point (64-bit)."""
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    try:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        f, params = CASES[name](rng)
        return ad.gradient_check(f, params, h)
    finally:
        ad.set_default_dtype(prev)


def run_all(seeds: Sequence[int], names: Sequence[str] | None = None, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per case over ``seeds``."""
    names = list(CASES) if names is None else list(names)
    return {n: max(check_case(n, s, h) for s in seeds) for n in names}
