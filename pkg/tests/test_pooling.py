import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spgp import autodiff as ad
from spgp.autodiff import Tensor
from spgp.graph import Graph
from spgp.pooling import (
    SPGP,
    STRUCTURE_LEARNING,
    LayerState,
    SpgpLayer,
    aux_score,
    complexity_report,
    pool_topk,
    pooled_size,
    prototype_score,
    prototype_vectors,
    relation_module,
    spgp_forward,
    topk_indices,
    total_score,
    write_scores_csv,
)
from spgp.structure import BCC, CLIQUE, KINDS, PrototypeSet, extract_all
from spgp.synth import gen_regular

from oracles import dense_normalized, random_graph_edges

FIX = Graph.from_edges(4, [(0, 1), (1, 2), (0, 2), (2, 3)])


def _zero_layer(d=2, lam=0.0, ratio=1.0, kinds=KINDS):
    layer = SpgpLayer(d, kinds, np.random.default_rng(0), lam=lam, ratio=ratio)
    for p in layer.parameters():
        p.data[:] = 0
    return layer


def test_prototype_vectors_examples():
    Ht = Tensor([[1.0, 0.0], [0.0, 2.0], [5.0, 5.0]])
    assert prototype_vectors(Ht, PrototypeSet(CLIQUE, ((2,),))).data.tolist() == [[5.0, 5.0]]
    assert prototype_vectors(Ht, PrototypeSet(CLIQUE, ((0, 1),))).data.tolist() == [[1.0, 2.0]]
    same = Tensor(np.tile([0.3, -0.4], (3, 1)))
    assert prototype_vectors(same, PrototypeSet(CLIQUE, ((0, 1, 2),))).data.tolist() == [[0.3, -0.4]]
    with pytest.raises(ValueError):
        prototype_vectors(Ht, PrototypeSet(CLIQUE, ((),)))


def test_relation_module_examples():
    Ht = Tensor([[3.0, 4.0], [9.0, 9.0]])
    ps = PrototypeSet(CLIQUE, ((0,),))
    Z = Tensor([[1.0, 2.0]])
    out = relation_module(Tensor(np.ones((4, 1))), Tensor([0.0]), Z, ps, Ht).data
    assert out[0, 0] == 1 + 2 + 3 + 4
    assert out[1, 0] == 0.0
    zero = relation_module(Tensor(np.zeros((4, 1))), Tensor([0.0]), Z, ps, Ht).data
    assert zero[0, 0] == 0.0


def test_prototype_score_hand_fixture():
    layer = _zero_layer()
    layer.W_node.data = np.array([[1.0], [-1.0]])
    layer.b_node.data = np.array([0.5])
    layer.W_s[BCC].data = np.array([[1.0], [0.0], [0.0], [1.0]])
    layer.b_s[BCC].data = np.array([0.1])
    layer.W_s[CLIQUE].data = np.array([[0.0], [1.0], [1.0], [0.0]])
    layer.b_s[CLIQUE].data = np.array([-0.2])
    Ht = Tensor([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, 0.0]])
    protos = {BCC: PrototypeSet(BCC, ((0, 1, 2),)), CLIQUE: PrototypeSet(CLIQUE, ((1, 2), (2, 3)))}
    score = prototype_score(layer, Ht, protos).data.ravel()
    assert np.allclose(score, [2.6, 3.4, 6.4, 7.3], atol=1e-12)


def test_prototype_score_trivial_cases():
    layer = _zero_layer()
    Ht = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
    assert not prototype_score(layer, Ht, {}).data.any()
    layer.W_node.data = np.array([[2.0], [1.0]])
    layer.b_node.data = np.array([0.3])
    protos = extract_all(FIX)
    expect = Ht.data @ layer.W_node.data + 0.3
    assert np.allclose(prototype_score(layer, Ht, protos).data, expect)


def test_aux_score_examples():
    W = Tensor(np.random.default_rng(0).normal(size=(2, 2)))
    iso = Graph.from_edges(2)
    Ht = Tensor([[1.0, -2.0], [0.5, 0.5]])
    assert aux_score(Ht, iso.adjacency(), W).data.ravel().tolist() == [3.0, 1.0]
    pair = Graph.from_edges(2, [(0, 1)])
    same = Tensor([[0.7, -0.1], [0.7, -0.1]])
    assert aux_score(same, pair.adjacency(), Tensor(np.eye(2))).data.ravel().tolist() == [0.0, 0.0]
    Ht = Tensor([[1.0, -1.0], [0.0, 0.0]])
    assert aux_score(Ht, pair.adjacency(), W).data[0, 0] == 2.0


def test_aux_score_is_literal_sum_not_mean():
    star = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    Ht = Tensor(np.ones((4, 1)))
    out = aux_score(Ht, star.adjacency(), Tensor([[1.0]])).data.ravel()
    assert out.tolist() == [2.0, 0.0, 0.0, 0.0]


def test_total_score_examples():
    p = Tensor([[0.3], [0.0], [1.0]])
    a = Tensor([[5.0], [0.0], [1.0]])
    assert total_score(p, a, 0.0).data[0, 0] == pytest.approx(1 / (1 + math.exp(-0.3)))
    assert total_score(p, a, 0.0).data[1, 0] == 0.5
    assert total_score(p, a, 1.0).data[2, 0] == pytest.approx(0.8807970779778823, abs=1e-12)


def test_pool_size_examples():
    assert pooled_size(5, 0.5) == 3
    assert pooled_size(3, 0.34) == 2
    assert pooled_size(30, 0.1) == 3
    with pytest.raises(ValueError):
        pooled_size(0, 0.5)


def test_pool_topk_example():
    H = Tensor(np.arange(6, dtype=float).reshape(3, 2))
    state = LayerState.from_graph(Graph.from_edges(3, [(0, 1), (1, 2)]), {}, H)
    phi = Tensor([[0.9], [0.1], [0.5]])
    out = pool_topk(state, phi, 0.34)
    assert out.orig_ids.tolist() == [0, 2]
    assert np.allclose(out.H.data, [[0.0, 0.9], [2.0, 2.5]])
    assert out.adjacency.nnz == 0


def test_pool_topk_full_ratio_keeps_everything():
    H = Tensor(np.ones((4, 2)))
    state = LayerState.from_graph(FIX, extract_all(FIX), H)
    phi = Tensor([[0.2], [0.4], [0.6], [0.8]])
    out = pool_topk(state, phi, 1.0)
    assert out.orig_ids.tolist() == [0, 1, 2, 3]
    assert (out.adjacency != state.adjacency).nnz == 0
    assert np.allclose(out.H.data[:, 0], [0.2, 0.4, 0.6, 0.8])


def test_topk_ties_fall_back_to_index_order():
    scores = np.array([0.5, 0.5, 0.9, 0.5, 0.5])
    assert topk_indices(scores, np.zeros(5, dtype=int), 1, 0.6).tolist() == [0, 1, 2]


def test_topk_per_graph_in_a_batch():
    scores = np.array([0.1, 0.9, 0.5, 0.3, 0.8])
    ids = np.array([0, 0, 0, 1, 1])
    assert topk_indices(scores, ids, 2, 0.5).tolist() == [1, 2, 4]


def test_pool_size_law_grid():
    for n in range(1, 51):
        for p in np.round(np.arange(1, 11) / 10, 1):
            kept = topk_indices(np.random.default_rng(n).random(n), np.zeros(n, dtype=int), 1, p)
            assert len(kept) == math.ceil(round(p * n, 9)), (n, p)


def test_spgp_forward_zero_weights():
    H = np.random.default_rng(0).normal(size=(4, 2))
    state = LayerState.from_graph(FIX, extract_all(FIX), Tensor(H))
    pooled, b = spgp_forward(_zero_layer(lam=0.0), state)
    assert np.allclose(b.total, 0.5)
    assert np.allclose(pooled.H.data, 0.5 * H)


def _dense_trace(layer, H, n, edges, protos):
    """Independent dense evaluation of one pooling step."""
    A = np.zeros((n, n))
    for u, v in edges:
        A[u, v] = A[v, u] = 1
    dist2 = ((A + np.eye(n)) @ (A + np.eye(n)) > 0) & ~((A + np.eye(n)) > 0)
    c_edges = [(u, v) for u in range(n) for v in range(u + 1, n) if dist2[u, v]]
    blk = layer.contextual
    t = dense_normalized(n, edges) @ H @ blk.W_t.data
    c = dense_normalized(n, c_edges) @ H @ blk.W_c.data
    z = np.hstack([t, c]) @ blk.W.data + blk.b.data
    Ht = H + np.where(z > 0, z, 0.01 * z)
    proto = Ht @ layer.W_node.data[:, 0] + layer.b_node.data[0]
    for kind, ps in protos.items():
        zsum = np.zeros((n, Ht.shape[1]))
        member = np.zeros(n, dtype=bool)
        for s in ps.sets:
            zv = Ht[list(s)].max(axis=0)
            for v in s:
                zsum[v] += zv
                member[v] = True
        q = np.hstack([zsum, Ht]) @ layer.W_s[kind].data[:, 0] + layer.b_s[kind].data[0]
        proto = proto + np.where(member, q, 0.0)
    aux = np.abs(Ht - A @ Ht @ layer.W_aux.data).sum(axis=1)
    phi = 1 / (1 + np.exp(-(proto + layer.lam * aux)))
    k = math.ceil(round(layer.ratio * n, 9))
    order = sorted(range(n), key=lambda v: (-phi[v], v))
    idx = sorted(order[:k])
    return proto, aux, phi, idx, H[idx] * phi[idx, None]


@pytest.mark.parametrize("seed", range(5))
def test_spgp_forward_matches_dense_trace(seed):
    rng = np.random.default_rng(seed)
    n = 7
    edges = [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (5, 3), (5, 6)]
    g = Graph.from_edges(n, edges)
    protos = extract_all(g)
    layer = SpgpLayer(3, KINDS, rng, lam=0.1, ratio=0.6)
    for p in layer.parameters():
        p.data += 0.2 * rng.normal(size=p.shape)
    H = rng.normal(size=(n, 3))
    pooled, b = spgp_forward(layer, LayerState.from_graph(g, protos, Tensor(H)))
    proto, aux, phi, idx, Hp = _dense_trace(layer, H, n, edges, protos)
    assert np.allclose(b.prototype_score, proto, atol=1e-12)
    assert np.allclose(b.aux_score, aux, atol=1e-12)
    assert np.allclose(b.total, phi, atol=1e-12)
    assert pooled.orig_ids.tolist() == idx
    assert np.allclose(pooled.H.data, Hp, atol=1e-12)
    assert b.kept.sum() == len(idx)


def test_ranking_survives_sigmoid_saturation():
    # large aux terms push phi to exactly 1.0; selection must still follow the logit
    n = 6
    g = Graph.from_edges(n, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)])
    layer = _zero_layer(d=1, lam=1.0, ratio=0.5, kinds=())
    H = Tensor(np.array([[40.0], [41.0], [45.0], [39.0], [50.0], [42.0]]))
    _, b = spgp_forward(layer, LayerState.from_graph(g, {}, H))
    assert (b.total == 1.0).all()
    assert np.flatnonzero(b.kept).tolist() == [2, 4, 5]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.floats(0.15, 0.8), st.floats(0.1, 1.0), st.integers(0, 10**6))
def test_pooled_graph_validity(n, p, ratio, seed):
    rng = np.random.default_rng(seed)
    g = Graph.from_edges(n, random_graph_edges(rng, n, p))
    layer = SpgpLayer(3, KINDS, rng, lam=0.2, ratio=ratio)
    state = LayerState.from_graph(g, extract_all(g), Tensor(rng.normal(size=(n, 3))))
    pooled, _ = spgp_forward(layer, state)
    k = pooled.num_nodes
    assert k == pooled_size(n, ratio)
    assert (pooled.adjacency != pooled.adjacency.T).nnz == 0
    for ps in pooled.prototypes.values():
        assert all(0 <= v < k for s in ps.sets for v in s)
    assert len(set(pooled.orig_ids.tolist())) == k


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.floats(0.2, 0.8), st.integers(0, 10**6))
def test_spgp_forward_permutation_equivariant(n, p, seed):
    rng = np.random.default_rng(seed)
    g = Graph.from_edges(n, random_graph_edges(rng, n, p))
    perm = rng.permutation(n)
    h = g.relabel(perm)
    layer = SpgpLayer(3, KINDS, rng, lam=0.3, ratio=0.7)
    H = rng.normal(size=(n, 3))
    Hp = np.empty_like(H)
    Hp[perm] = H
    a, ba = spgp_forward(layer, LayerState.from_graph(g, extract_all(g), Tensor(H)))
    b, bb = spgp_forward(layer, LayerState.from_graph(h, extract_all(h), Tensor(Hp)))
    assert np.allclose(bb.total[perm], ba.total, atol=1e-12)
    assert sorted(perm[a.orig_ids].tolist()) == sorted(b.orig_ids.tolist())


def test_zero_affinity_exact():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(4, 15))
        g = Graph.from_edges(n, random_graph_edges(rng, n, rng.uniform(0.1, 0.6)))
        protos = extract_all(g)
        layer = SpgpLayer(4, KINDS, rng)
        Ht = Tensor(rng.normal(size=(n, 4)) * 10)
        parts = {}
        prototype_score(layer, Ht, protos, parts)
        for kind, ps in protos.items():
            outside = ps.membership(n) == 0
            assert (parts[kind].data[outside] == 0.0).all()


@pytest.mark.parametrize("seed", range(5))
def test_regular_graph_member_nonmember_differ(seed):
    g = gen_regular(30, 4, seed)
    layer = SpgpLayer(4, KINDS, np.random.default_rng(seed), lam=0.0)
    protos = {CLIQUE: PrototypeSet.build(CLIQUE, [(0, 5, 9)]), BCC: PrototypeSet(BCC)}
    _, b = spgp_forward(layer, LayerState.from_graph(g, protos, Tensor(np.ones((30, 4)))))
    member = np.isin(np.arange(30), [0, 5, 9])
    assert np.abs(b.total[member][:, None] - b.total[~member][None, :]).min() > 1e-8


def test_detached_scores_block_gradient():
    rng = np.random.default_rng(3)
    protos = extract_all(FIX)
    layer = SpgpLayer(2, KINDS, rng, lam=0.1, ratio=0.75)
    H = Tensor(rng.normal(size=(4, 2)))
    for detach, expect_zero in ((True, True), (False, False)):
        layer.W_node.grad = None
        pooled, _ = spgp_forward(layer, LayerState.from_graph(FIX, protos, H), detach_scores=detach)
        ad.sum(pooled.H).backward()
        g = layer.W_node.grad
        assert (g is None or not g.any()) == expect_zero


def test_batched_forward_matches_single():
    rng = np.random.default_rng(9)
    g1, g2 = FIX, Graph.from_edges(5, [(0, 1), (1, 2), (2, 0), (3, 4)])
    layer = SpgpLayer(3, KINDS, rng, lam=0.2, ratio=0.5)
    H1, H2 = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    both, bb = spgp_forward(layer, LayerState.from_graphs(
        [g1, g2], [extract_all(g1), extract_all(g2)], Tensor(np.vstack([H1, H2]))))
    one, b1 = spgp_forward(layer, LayerState.from_graph(g1, extract_all(g1), Tensor(H1)))
    two, b2 = spgp_forward(layer, LayerState.from_graph(g2, extract_all(g2), Tensor(H2)))
    assert np.allclose(bb.total, np.concatenate([b1.total, b2.total]), atol=1e-13)
    assert np.allclose(both.H.data, np.vstack([one.H.data, two.H.data]), atol=1e-13)


def test_write_scores_csv(tmp_path):
    state = LayerState.from_graph(FIX, extract_all(FIX), Tensor(np.ones((4, 2))))
    _, b = spgp_forward(_zero_layer(lam=0.0), state)
    path = tmp_path / "scores.csv"
    write_scores_csv(path, [b])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["graph_idx", "node_orig_id", "prototype_score", "aux_score", "total"]
    assert len(rows) == 5 and float(rows[1][4]) == 0.5


def test_complexity_examples():
    assert complexity_report(100, 10, 2, SPGP) == (2000, 1000)
    assert complexity_report(100, 10, 1, STRUCTURE_LEARNING) == (100000, 10000)
    assert complexity_report(200, 10, 2, SPGP)[1] == 2 * complexity_report(100, 10, 2, SPGP)[1]
    assert complexity_report(200, 10, 1, STRUCTURE_LEARNING)[1] == 4 * 10000
    with pytest.raises(ValueError):
        complexity_report(0, 10)
