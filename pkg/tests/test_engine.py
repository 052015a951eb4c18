import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foci import engine as E
from foci.engine import NonFiniteError, ShapeError, Tensor

TOL = 1e-6


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def scalar(t):
    """Reduce with a fixed random projection so every output entry matters."""
    w = np.random.default_rng(0).normal(size=t.shape)
    return E.sum(E.mul(t, w))


UNARY = {
    "sigmoid": (E.sigmoid, -3, 3),
    "tanh": (E.tanh, -2, 2),
    "exp": (E.exp, -2, 2),
    "log": (E.log, 0.2, 3),
    "square": (E.square, -2, 2),
    "relu": (E.relu, 0.1, 2),  # away from the kink
    "neg": (E.neg, -2, 2),
    "log_softmax": (E.log_softmax, -2, 2),
    "softmax": (E.softmax, -2, 2),
    "transpose": (E.transpose, -1, 1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn, lo, hi = UNARY[name]
    a = leaf(rng, 3, 4, lo=lo, hi=hi)
    assert E.grad_check(lambda: scalar(fn(a)), [a]) < TOL


def test_relu_negative_side(rng):
    a = leaf(rng, 5, lo=-2, hi=-0.1)
    assert E.grad_check(lambda: scalar(E.relu(a)), [a]) < TOL


@pytest.mark.parametrize("op", [E.add, E.sub, E.mul, E.div])
@pytest.mark.parametrize("shape_b", [(3, 4), (1, 4), (3, 1), ()])
def test_binary_broadcast_gradients(op, shape_b, rng):
    a = leaf(rng, 3, 4, lo=0.5, hi=2)
    b = leaf(rng, *shape_b, lo=0.5, hi=2)
    assert E.grad_check(lambda: scalar(op(a, b)), [a, b]) < TOL


def test_matmul_gradient(rng):
    a, b = leaf(rng, 3, 5), leaf(rng, 5, 2)
    assert E.grad_check(lambda: scalar(E.matmul(a, b)), [a, b]) < TOL


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reductions(axis, rng):
    a = leaf(rng, 3, 4)
    assert E.grad_check(lambda: scalar(E.sum(a, axis)), [a]) < TOL
    assert E.grad_check(lambda: scalar(E.mean(a, axis)), [a]) < TOL


def test_structural_ops(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
    assert E.grad_check(lambda: scalar(E.concat([a, b])), [a, b]) < TOL
    assert E.grad_check(lambda: scalar(E.gather_rows(b, [3, 0, 3])), [b]) < TOL
    assert E.grad_check(lambda: scalar(E.reshape(a, (3, 2))), [a]) < TOL


def test_clip_interior_and_outside(rng):
    a = Tensor(np.array([-2.0, -0.3, 0.2, 0.7, 3.0]), requires_grad=True)
    E.backward(E.sum(E.clip(a, -1.0, 1.0)))
    assert a.grad.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_masked_softmax_gradient_and_zeros(rng):
    a = leaf(rng, 2, 5)
    mask = np.array([[0, -np.inf, 0, 0, -np.inf]])
    out = E.softmax(a, mask)
    assert np.all(out.data[:, [1, 4]] == 0.0)
    assert np.allclose(out.data.sum(axis=1), 1.0)
    assert E.grad_check(lambda: scalar(E.softmax(a, mask)), [a]) < TOL


@pytest.mark.parametrize("heads", [1, 2])
@pytest.mark.parametrize("with_mask", [False, True])
def test_attention_gradient(heads, with_mask, rng):
    q, k, v = leaf(rng, 5, 4), leaf(rng, 5, 4), leaf(rng, 5, 4)
    w = Tensor(rng.uniform(0.2, 1.5, 5), requires_grad=True)
    mask = np.array([[0, 0, -np.inf, 0, 0]]) if with_mask else None
    f = lambda: scalar(E.attention(q, k, v, heads, mask, 0.7, key_weights=w))  # noqa: E731
    assert E.grad_check(f, [q, k, v, w]) < TOL
    g = lambda: scalar(E.attention(q, k, v, heads, mask, 0.7))  # noqa: E731
    assert E.grad_check(g, [q, k, v]) < TOL


def test_attention_matches_reference(rng):
    n, h, heads = 6, 4, 2
    q, k, v = (rng.normal(size=(n, h)) for _ in range(3))
    out = E.attention(q, k, v, heads, scale=0.5).data
    for j in range(heads):
        sl = slice(2 * j, 2 * j + 2)
        z = 0.5 * q[:, sl] @ k[:, sl].T
        a = np.exp(z - z.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        assert np.allclose(out[:, sl], a @ v[:, sl], atol=1e-13)


def test_attention_key_weight_semantics(rng):
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    base = E.attention(q, k, v, 2).data
    assert np.array_equal(E.attention(q, k, v, 2, key_weights=np.ones(5)).data, base)
    w = np.array([1.0, 1.0, 0.0, 1.0, 1.0])
    dropped = E.attention(q, k, v, 2, key_weights=w).data
    masked = E.attention(q, k, v, 2, mask=np.array([[0, 0, -np.inf, 0, 0]])).data
    assert np.allclose(dropped, masked, atol=1e-14)


def test_reweight(rng):
    p = Tensor(rng.dirichlet(np.ones(5), size=2), requires_grad=True)
    w = Tensor(rng.uniform(0.3, 2, 5), requires_grad=True)
    assert E.grad_check(lambda: scalar(E.reweight(p, w)), [p, w]) < TOL
    assert np.array_equal(E.reweight(p, np.ones(5)).data, p.data)
    out = E.reweight(p, w).data
    assert np.allclose(out.sum(axis=1), 1.0)


def test_straight_through_forward_and_gradient(rng):
    s = leaf(rng, 6)
    hard = (s.data > 0).astype(float)
    st_ = E.straight_through(hard, E.sigmoid(s))
    assert np.array_equal(st_.data, hard)
    E.backward(E.sum(st_))
    sig = 1 / (1 + np.exp(-s.data))
    assert np.allclose(s.grad, sig * (1 - sig), rtol=1e-12)


def test_stop_gradient_blocks(rng):
    a = leaf(rng, 3)
    out = E.add(E.sum(E.stop_gradient(a)), E.sum(a))
    E.backward(out)
    assert np.array_equal(a.grad, np.ones(3))


def test_backward_accumulates_on_leaves(rng):
    a = leaf(rng, 3)
    E.backward(E.sum(E.mul(a, 2.0)))
    E.backward(E.sum(E.mul(a, 2.0)))
    assert np.array_equal(a.grad, np.full(3, 4.0))


def test_shared_subgraph_counts_once_per_path(rng):
    a = leaf(rng, 3)
    b = E.mul(a, a)
    E.backward(E.sum(E.add(b, b)))
    assert np.allclose(a.grad, 4 * a.data)


def test_errors():
    with pytest.raises(ShapeError):
        E.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        E.backward(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(NonFiniteError):
        E.log(Tensor(np.zeros(2)))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(ShapeError):
        E.attention(np.ones((3, 4)), np.ones((3, 4)), np.ones((3, 4)), 3)
    with pytest.raises(ShapeError):
        E.softmax(Tensor(np.ones((1, 2))), np.array([[-np.inf, -np.inf]]))


def test_frozen_inputs_build_no_graph():
    out = E.mul(Tensor(np.ones(3)), 2.0)
    assert not out.requires_grad and out._parents == ()


finite = st.floats(-5, 5, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_product_rule_property(x, y):
    a, b = Tensor(x.copy(), requires_grad=True), Tensor(y.copy(), requires_grad=True)
    E.backward(E.sum(E.mul(a, b)))
    assert np.array_equal(a.grad, y) and np.array_equal(b.grad, x)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = E.softmax(Tensor(x)).data
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.exp(E.log_softmax(Tensor(x)).data), p, atol=1e-12)
