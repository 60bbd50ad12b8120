import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmd import tensor as T
from vmd.tensor import GraphStateError, ShapeError, Tensor, gradient_check, graph_nodes


def leaf(x):
    return Tensor(x, requires_grad=True)


# -- forward values ---------------------------------------------------------------


def test_matmul_identity():
    I = np.eye(2)
    np.testing.assert_array_equal(T.matmul(Tensor(I), Tensor(I)).data, I)


def test_matmul_hand_product():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_inner_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_exp_log_relu():
    np.testing.assert_array_equal(T.exp(Tensor([0.0, 0.0])).data, [1.0, 1.0])
    assert T.log(Tensor(0.0)).item() == math.log(1e-12)
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_elementwise_rejects_general_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    # scalar with tensor is fine
    np.testing.assert_array_equal(T.mul(Tensor(np.ones((2, 3))), 2.0).data, 2 * np.ones((2, 3)))


def test_reductions():
    assert T.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0
    np.testing.assert_array_equal(T.tsum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0).data, [4.0, 6.0])
    with pytest.raises(ShapeError):
        T.tsum(Tensor(np.zeros(0)))
    with pytest.raises(ShapeError):
        T.tsum(Tensor(np.ones((2, 2))), axis=2)


def test_softmax_simple_cases():
    np.testing.assert_allclose(T.softmax(Tensor([3.0, 3.0, 3.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(T.softmax(Tensor([7.5])).data, [1.0])


def test_softmax_large_logits_match_extended_precision():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    mpmath.mp.dps = 50
    den = mpmath.exp(1000) + mpmath.exp(0)
    oracle = [float(mpmath.exp(1000) / den), float(mpmath.exp(0) / den)]
    np.testing.assert_allclose(out, oracle, rtol=1e-15, atol=1e-300)


def test_cosine_similarity_cases():
    v = Tensor([0.3, -1.2, 2.0])
    assert T.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity(v, -v).item() == pytest.approx(-1.0, abs=1e-15)
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    # zero vector goes through the norm floor instead of dividing by zero
    assert T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 0.0


# -- backward -----------------------------------------------------------------------


def test_backward_sum():
    w = leaf([1.0, 2.0, 3.0])
    T.tsum(w).backward()
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_mean_square():
    w = leaf([1.0, 2.0])
    T.mean(T.mul(w, w)).backward()
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])


def test_backward_requires_scalar():
    w = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        T.mul(w, 2.0).backward()


def test_double_backward_is_state_error():
    w = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(w, w))
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_backward_visits_each_node_once():
    w = leaf([0.5, -0.25])
    a = T.mul(w, w)
    b = T.add(a, a)  # a is reused
    loss = T.tsum(T.add(b, a))
    n = len(graph_nodes(loss))
    assert n == 4
    assert loss.backward() == n
    # d/dw of sum(3 w^2) = 6 w
    np.testing.assert_allclose(w.grad, 6 * np.array([0.5, -0.25]), rtol=0, atol=1e-15)


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with T.no_grad():
        out = T.mul(w, 3.0)
    assert out.node is None and not out.requires_grad


# -- finite-difference checks --------------------------------------------------------

RNG = np.random.default_rng(1234)
W34 = Tensor(RNG.standard_normal((3, 4)))
W32 = Tensor(RNG.standard_normal((3, 2)))


def _rand(*shape):
    return leaf(RNG.standard_normal(shape))


OP_CASES = {
    "matmul": (lambda a, b: T.tsum(T.tanh(T.matmul(a, b))), lambda: (_rand(3, 4), _rand(4, 2))),
    "linear": (lambda x, w, b: T.tsum(T.tanh(T.linear(x, w, b))), lambda: (_rand(3, 4), _rand(4, 2), _rand(2))),
    "add": (lambda a, b: T.tsum(T.tanh(T.add(a, b))), lambda: (_rand(3, 2), _rand(3, 2))),
    "sub": (lambda a, b: T.tsum(T.tanh(T.sub(a, b))), lambda: (_rand(3, 2), _rand(3, 2))),
    "mul": (lambda a, b: T.tsum(T.mul(a, b)), lambda: (_rand(3, 2), _rand(3, 2))),
    "mul_scalar": (lambda a, b: T.tsum(T.tanh(T.mul(a, b))), lambda: (_rand(3, 2), _rand(1))),
    "div": (lambda a, b: T.tsum(T.div(a, T.add(T.exp(b), 0.5))), lambda: (_rand(3, 2), _rand(3, 2))),
    "scale": (lambda a: T.tsum(T.tanh(T.scale(a, -1.7))), lambda: (_rand(5),)),
    "exp": (lambda a: T.tsum(T.exp(a)), lambda: (_rand(4),)),
    "log": (lambda a: T.tsum(T.log(T.add(T.mul(a, a), 0.3))), lambda: (_rand(4),)),
    "tanh": (lambda a: T.tsum(T.tanh(a)), lambda: (_rand(4),)),
    "relu": (lambda a: T.tsum(T.mul(T.relu(a), a)), lambda: (_rand(6),)),
    "clamp": (lambda a: T.tsum(T.mul(T.clamp(a, -0.5, 0.5), a)), lambda: (_rand(6),)),
    "sum_axis": (lambda a: T.tsum(T.tanh(T.tsum(a, axis=1))), lambda: (_rand(3, 4),)),
    "mean_axis": (lambda a: T.tsum(T.tanh(T.mean(a, axis=0))), lambda: (_rand(3, 4),)),
    "getitem": (lambda a: T.tsum(T.tanh(a[:, 1:])), lambda: (_rand(3, 4),)),
    "transpose": (lambda a: T.tsum(T.mul(T.transpose(a), Tensor(np.arange(6.0).reshape(3, 2)))), lambda: (_rand(2, 3),)),
    "reshape": (lambda a: T.tsum(T.tanh(T.reshape(a, (6,)))), lambda: (_rand(2, 3),)),
    "softmax": (lambda a: T.tsum(T.mul(T.softmax(a, axis=1), W34)), lambda: (_rand(3, 4),)),
    "cosine_similarity": (lambda a, b: T.tsum(T.mul(T.cosine_similarity(a, b), Tensor([1.0, -2.0, 0.5]))), lambda: (_rand(3, 4), _rand(3, 4))),
    "pairwise_cosine": (lambda a, b: T.tsum(T.mul(T.pairwise_cosine(a, b), W32)), lambda: (_rand(3, 4), _rand(2, 4))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradient_check_every_op(name):
    f, make = OP_CASES[name]
    for _ in range(10):
        assert gradient_check(f, *make()) < 1e-4


def test_gradient_check_linear_function_is_exact():
    x = _rand(5)
    assert gradient_check(T.tsum, x) < 1e-9


def test_gradient_check_rejects_zero_eps():
    with pytest.raises(ValueError):
        gradient_check(T.tsum, _rand(3), eps=0.0)


# -- properties ------------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))))
def test_cosine_symmetric_and_bounded(pair):
    a, b = pair
    ab = T.cosine_similarity(Tensor(a), Tensor(b)).item()
    ba = T.cosine_similarity(Tensor(b), Tensor(a)).item()
    assert ab == ba
    assert -1.0 - 1e-12 <= ab <= 1.0 + 1e-12
