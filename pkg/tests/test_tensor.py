import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import log_softmax as sp_log_softmax, softmax as sp_softmax

from minitransfer import tensor as T
from minitransfer.errors import DimensionError, DomainError, LabelIndexError, OptimizerStateError
from minitransfer.gradcheck import grad_check
from minitransfer.optim import SGD, Adam, Optimizer
from minitransfer.tensor import Parameter, backward


def param(name, rng, *shape):
    return Parameter(name, rng.normal(size=shape))


# matmul

def test_matmul_identity():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(T.matmul(a, np.eye(2)).data, a)


def test_matmul_column():
    out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_zeros():
    out = T.matmul(np.ones((3, 2)), np.zeros((2, 4)))
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError) as e:
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(e.value)


# softmax / losses

def test_softmax_symmetric():
    assert np.array_equal(T.softmax(np.zeros((1, 2))).data, [[0.5, 0.5]])


def test_softmax_direct():
    out = T.softmax(np.log([[1.0, 3.0]])).data
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(x).data
    assert (y >= 0).all()
    assert np.abs(y.sum(axis=-1) - 1).max() <= 1e-12
    assert np.allclose(y, sp_softmax(x, axis=-1), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_log_softmax_matches_scipy(x):
    assert np.allclose(T.log_softmax(x).data, sp_log_softmax(x, axis=-1), atol=1e-12)


def test_cross_entropy_peaked():
    logits = np.array([[40.0, 0.0, 0.0], [0.0, 0.0, 35.0]])
    assert T.cross_entropy(logits, [0, 2]).item() < 1e-9


def test_cross_entropy_uniform():
    assert T.cross_entropy(np.zeros((3, 4)), [0, 1, 3]).item() == pytest.approx(np.log(4), abs=1e-12)


def test_cross_entropy_bad_label():
    with pytest.raises(LabelIndexError):
        T.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_cross_entropy_is_mean_of_nll():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, 5)
    assert T.cross_entropy(x, y).item() == pytest.approx(T.nll(x, y).data.mean(), abs=1e-14)


def test_kl_identity_and_domain():
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert abs(T.kl_soft(x, x, 2.0).item()) < 1e-15
    with pytest.raises(DomainError):
        T.kl_soft(x, x, 0.0)


def test_kl_matches_direct_sum():
    rng = np.random.default_rng(2)
    t, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    p, q = sp_softmax(t / 3, axis=-1), sp_softmax(s / 3, axis=-1)
    want = (p * np.log(p / q)).sum() / 3
    assert T.kl_soft(t, s, 3.0).item() == pytest.approx(want, abs=1e-13)


# gradient reversal

def test_grad_reverse_forward_identity():
    assert np.array_equal(T.grad_reverse(np.array([1.0, 2, 3]), 0.5).data, [1, 2, 3])


def test_grad_reverse_backward():
    w = Parameter("w", np.array([1.0, 2, 3]))
    backward(T.tsum(T.grad_reverse(w, 1.0)))
    assert np.array_equal(w.grad, [-1.0, -1, -1])


def test_grad_reverse_zero_lambda():
    w = Parameter("w", np.array([1.0, 2, 3]))
    backward(T.tsum(T.grad_reverse(w, 0.0) * 5.0))
    assert not np.any(w.grad)


# backward

def test_backward_square():
    w = Parameter("w", np.array([1.5, -2.0, 0.25]))
    backward(T.tsum(w * w))
    assert np.array_equal(w.grad, 2 * w.data)


def test_backward_independent_param():
    w, v = Parameter("w", np.ones(3)), Parameter("v", np.ones(2))
    backward(T.tsum(v * 3.0))
    assert not np.any(w.grad)


def test_backward_nonscalar():
    w = Parameter("w", np.ones(3))
    with pytest.raises(DimensionError):
        backward(w * 2.0)


def test_backward_accumulates_until_zeroed():
    w = Parameter("w", np.array([1.0, 2.0]))
    backward(T.tsum(w * w))
    backward(T.tsum(w * w))
    assert np.array_equal(w.grad, 4 * w.data)
    w.zero_grad()
    assert not np.any(w.grad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_linear(seed):
    rng = np.random.default_rng(seed)
    w = param("w", rng, 3, 4)
    x = rng.normal(size=(2, 3))
    l1 = lambda: T.tsum(T.tanh(T.matmul(x, w)))
    l2 = lambda: T.cross_entropy(T.matmul(x, w), [0, 3])
    backward(l1())
    g1 = w.grad.copy()
    w.zero_grad()
    backward(l2())
    g2 = w.grad.copy()
    w.zero_grad()
    backward(l1() + l2())
    assert np.allclose(w.grad, g1 + g2, rtol=0, atol=1e-14)


def test_composite_network_matches_finite_differences():
    rng = np.random.default_rng(3)
    W, b = param("W", rng, 4, 3), param("b", rng, 3)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    err = grad_check(lambda: T.cross_entropy(T.tanh(x @ W + b), y), [W, b])
    assert err <= 1e-4


def test_grad_check_linear_and_quadratic():
    w = Parameter("w", np.random.default_rng(4).normal(size=5))
    assert grad_check(lambda: T.tsum(w * 3.0), [w]) < 1e-10
    assert grad_check(lambda: T.tsum(w * w) + T.tsum(w), [w]) < 1e-8


def test_grad_check_leaves_params_unchanged():
    w = Parameter("w", np.arange(4.0))
    before = w.data.copy()
    grad_check(lambda: T.tsum(T.exp(w * 0.1)), [w])
    assert np.array_equal(w.data, before) and not np.any(w.grad)


def test_no_grad_builds_no_graph():
    w = Parameter("w", np.ones(2))
    with T.no_grad():
        out = T.tsum(w * w)
    assert not out.requires_grad
    backward(out)
    assert not np.any(w.grad)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        W = param("W", rng, 4, 4)
        x = rng.normal(size=(3, 4))
        backward(T.tsum(T.softmax(T.layer_norm(x @ W, np.ones(4), np.zeros(4)))[:, 0]))
        return W.grad.tobytes()
    assert run() == run()


# optimizers

def test_sgd_step():
    w = Parameter("w", np.array([1.0]))
    w.grad = np.array([0.5])
    SGD([w], 0.1).step()
    assert w.data[0] == pytest.approx(0.95, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_grad_leaves_params(kind):
    w = Parameter("w", np.array([1.0, -2.0]))
    opt = Optimizer([w], 0.1, kind)
    for _ in range(3):
        opt.step()
    assert np.array_equal(w.data, [1.0, -2.0])


def test_adam_first_step():
    w = Parameter("w", np.array([1.0]))
    w.grad = np.array([0.2])
    Adam([w], 0.01).step()
    assert 1.0 - w.data[0] == pytest.approx(0.01 * 0.2 / (0.2 + 1e-8), abs=1e-15)


def test_adam_moment_shape_mismatch():
    w = Parameter("w", np.ones(2))
    w.grad = np.ones(2)
    opt = Adam([w], 0.01)
    opt.step()
    w.data = np.ones(3)
    w.grad = np.ones(3)
    with pytest.raises(OptimizerStateError):
        opt.step()
