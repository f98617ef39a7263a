import numpy as np
import pytest

from spgp import autodiff as ad
from spgp.autodiff import Adam, DimensionError, Tensor
from spgp.gradcheck import CASES, check_case


def test_forward_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    x = Tensor([[1.0, 0.0], [0.0, 2.0]])
    assert ad.segment_max(x, np.array([0, 0]), 1).data.tolist() == [[1.0, 2.0]]
    assert ad.concat([Tensor(np.ones((3, 2))), Tensor(np.zeros((3, 2)))], axis=1).shape == (3, 4)
    assert ad.l1_norm(Tensor([[1.0, -2.0], [0.0, 0.5]])).data.tolist() == [[3.0], [0.5]]
    assert ad.leaky_relu(Tensor([-2.0, 3.0])).data.tolist() == [-0.02, 3.0]


def test_backward_examples():
    x = ad.parameter([1.0, 2.0, 3.0])
    ad.sum(ad.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0, 6.0]

    w = ad.parameter([[0.0], [0.0]])
    inp = np.array([[3.0, -1.0]])
    ad.sum(ad.sigmoid(ad.matmul(Tensor(inp), w))).backward()
    assert np.allclose(w.grad.ravel(), 0.25 * inp.ravel())


def test_backward_accumulates_and_requires_scalar():
    x = ad.parameter([1.0, 2.0])
    ad.sum(x).backward()
    ad.sum(x).backward()
    assert x.grad.tolist() == [2.0, 2.0]
    with pytest.raises(ValueError, match="scalar"):
        ad.mul(x, 2.0).backward()


def test_shared_subexpression_visited_once():
    x = ad.parameter([2.0])
    y = ad.mul(x, x)
    z = ad.add(y, y)  # dz/dx = 4x
    ad.sum(z).backward()
    assert x.grad.tolist() == [8.0]


def test_segment_max_tie_goes_to_lowest_row():
    x = ad.parameter([[1.0, 5.0], [1.0, 5.0], [0.0, 5.0]])
    ad.sum(ad.segment_max(x, np.array([0, 0, 0]), 1)).backward()
    assert x.grad.tolist() == [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]


def test_dropout_modes():
    x = Tensor(np.ones((200, 5)))
    assert ad.dropout(x, 0.5, False) is x
    y = ad.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert 0.4 < (y > 0).mean() < 0.6


def test_layer_norm_rows():
    x = Tensor(np.random.default_rng(3).normal(2.0, 5.0, size=(6, 8)))
    y = ad.layer_norm(x).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-6)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-6)


def test_dimension_errors_name_the_primitive():
    with pytest.raises(DimensionError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="concat"):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)
    with pytest.raises(DimensionError, match="softmax_cross_entropy"):
        ad.softmax_cross_entropy(Tensor(np.ones((2, 3))), [0])


def test_losses_match_closed_form():
    z = np.array([[2.0, -1.0, 0.5]])
    ce = ad.softmax_cross_entropy(Tensor(z), [2]).item()
    assert ce == pytest.approx(-np.log(np.exp(0.5) / np.exp(z).sum()))
    bce = ad.binary_cross_entropy_with_logits(Tensor([[0.3, -1.0]]), [[1.0, np.nan]]).item()
    assert bce == pytest.approx(np.log1p(np.exp(-0.3)))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    for seed in range(3):
        assert check_case(name, seed) <= 1e-4, (name, seed)


def test_determinism():
    a = check_case("spgp_forward", 5)
    b = check_case("spgp_forward", 5)
    assert a == b


def test_adam_examples():
    p = ad.parameter([1.5])
    opt = Adam([p], lr=0.01)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data.tolist() == [1.5]

    q = ad.parameter([0.0])
    opt = Adam([q], lr=0.01)
    q.grad = np.ones(1)
    opt.step()
    assert q.data[0] == pytest.approx(-0.01, rel=1e-6)
    assert q.grad.tolist() == [0.0]


def test_adam_missing_grad():
    p = ad.parameter([1.0])
    with pytest.raises(ValueError, match="no gradient"):
        Adam([p]).step()


def test_adam_weight_decay_pulls_to_zero():
    p = ad.parameter([3.0])
    opt = Adam([p], lr=0.1, weight_decay=1.0)
    for _ in range(50):
        p.grad = np.zeros(1)
        opt.step()
    assert abs(p.data[0]) < 3.0


def test_adam_quadratic_bowl():
    rng = np.random.default_rng(0)
    target = rng.normal(size=4)
    w = ad.parameter(rng.normal(size=4) * 3)
    opt = Adam([w], lr=0.05)

    def loss():
        d = ad.sub(w, target)
        return ad.sum(ad.mul(d, d))

    first = loss().item()
    history = []
    for _ in range(200):
        value = loss()
        history.append(value.item())
        value.backward()
        opt.step()
    assert history[-1] < first / 10


def test_float32_mode():
    ad.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    params = {"w": ad.parameter(rng.normal(size=(3, 2))), "b": ad.parameter(rng.normal(size=(2,)))}
    path = tmp_path / "ck.txt"
    ad.save_checkpoint(path, params, {"note": "x"})
    values, meta = ad.load_checkpoint(path)
    assert meta == {"note": "x"}
    for k in params:
        assert np.array_equal(values[k], params[k].data)
    text = path.read_text()
    ad.save_checkpoint(path, {k: Tensor(v) for k, v in values.items()}, meta)
    assert path.read_text() == text


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("hello\n")
    with pytest.raises(ValueError, match="not an SPGP checkpoint"):
        ad.load_checkpoint(path)
