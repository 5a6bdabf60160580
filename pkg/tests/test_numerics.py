import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffret import numerics as nx
from diffret.errors import ContractError, DimensionError, NumericError
from diffret.numerics import Adam, GradTape, Tensor, backward, grad_check


def test_matmul_identity():
    out = nx.matmul(np.eye(2), [[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_hand_product():
    assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    out = nx.matmul(np.zeros((3, 2)), np.random.default_rng(0).normal(size=(2, 5)))
    assert out.shape == (3, 5)
    assert not out.data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3)
    e = np.e
    np.testing.assert_allclose(nx.softmax([1.0, 0.0]).data, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    np.testing.assert_allclose(nx.softmax([1.0, 0.0]).data, [0.7311, 0.2689], atol=1e-4)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        nx.softmax([np.nan, 1.0])


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant_and_simplex(x, c):
    p = nx.softmax(x).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1) < 1e-9
    np.testing.assert_allclose(nx.softmax(x + c).data, p, atol=1e-9)


def test_relu_cases():
    assert nx.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    assert not nx.relu(-np.arange(1.0, 5.0)).data.any()
    x = np.array([0.0, 0.5, 3.0])
    np.testing.assert_array_equal(nx.relu(x).data, x)


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum_(x * x)
    backward(y, tape)
    assert x.grad.tolist() == [6.0]


def test_backward_constant_function_has_zero_gradient():
    x = Tensor(np.random.default_rng(1).normal(size=6), requires_grad=True)
    with GradTape() as tape:
        y = nx.sum_(nx.softmax(x))
    backward(y, tape)
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_contract_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * x
    with pytest.raises(ContractError):
        backward(y, tape)
    with GradTape() as tape:
        y = nx.sum_(x * x)
    backward(y, tape)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_ops_outside_tape_are_constants():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    assert not y.requires_grad


def test_grad_check_polynomial():
    assert grad_check(lambda x: nx.sum_(x * x), np.array([1.0, 2.0, 3.0])) < 1e-6


def test_grad_check_detects_wrong_gradient():
    # a deliberately broken op: forward x^2, backward claims 3x
    def broken(x):
        return nx._make(x.data ** 2, (x,), lambda g: (3 * g * x.data,), "broken")

    assert grad_check(lambda x: nx.sum_(broken(x)), np.array([1.0, 2.0])) > 0.1


def _random_ops(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(3, 4))
    return [
        lambda x: nx.sum_(nx.matmul(x, b) * nx.matmul(x, b)),
        lambda x: nx.sum_(nx.matmul(nx.transpose(x), a)),
        lambda x: nx.sum_(nx.softmax(x, axis=-1) * w),
        lambda x: nx.sum_(nx.softmax(x, axis=0) * w),
        lambda x: nx.sum_(nx.log_softmax(x, axis=1) * w),
        lambda x: nx.sum_(nx.relu(x) * w),
        lambda x: nx.sum_(nx.exp(nx.scale(x, 0.3)) * w),
        lambda x: nx.sum_(nx.log(x * x + 1.0) * w),
        lambda x: nx.sum_(nx.sqrt(x * x + pos) * w),
        lambda x: nx.sum_(nx.div(x, pos) * w) + nx.sum_(nx.div(pos, x * x + 1.0)),
        lambda x: nx.sum_(nx.l2norm(x, axis=-1) * w[:, 0]),
        lambda x: nx.sum_(nx.concat([x, x * x], axis=1) * np.concatenate([w, w], axis=1)),
        lambda x: nx.mean(nx.reshape(x, (4, 3)) * w.reshape(4, 3)),
        lambda x: nx.sum_(nx.broadcast_to(nx.reshape(x, (1, 3, 4)), (2, 3, 4)) * w),
        lambda x: nx.sum_(nx.sum_(x, axis=1) * w[:, 1]) + nx.sum_(x - pos) + nx.sum_(x + pos),
        lambda x: nx.sum_(x[1:] * w[:2]) + nx.sum_(x[:, ::2] * x[:, ::2]),
    ]


def test_every_op_passes_grad_check_on_random_inputs():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        fns = _random_ops(rng)
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 1e-3] = 0.1  # keep relu away from its kink
        for f in fns:
            worst = max(worst, grad_check(f, x))
    assert worst < 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 5))

    def grads():
        x = Tensor(x0, requires_grad=True)
        W = Tensor(w, requires_grad=True)
        with GradTape() as tape:
            loss = nx.sum_(nx.softmax(nx.relu(x @ W), axis=-1) * x0)
        backward(loss, tape)
        return x.grad.tobytes() + W.grad.tobytes()

    assert grads() == grads()


def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        nx.exp([1000.0])
    with pytest.raises(NumericError):
        nx.l2norm(np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 20), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_matmul_rows_are_position_independent(B, N, D, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, N, D))
    W = rng.normal(size=(D, 7))
    perm = rng.permutation(N)
    np.testing.assert_array_equal(nx.matmul(x, W).data[:, perm], nx.matmul(x[:, perm], W).data)


def test_adam_zero_lr_leaves_params_unchanged():
    p = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
    before = p.data.tobytes()
    opt = Adam([p], lr=0.0)
    for _ in range(3):
        opt.zero_grad()
        with GradTape() as tape:
            loss = nx.sum_(p * p)
        backward(loss, tape)
        opt.step()
    assert p.data.tobytes() == before


def test_adam_minimizes_quadratic():
    p = Tensor([3.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        with GradTape() as tape:
            loss = nx.sum_((p - [1.0, 1.0]) * (p - [1.0, 1.0]))
        backward(loss, tape)
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-3)


def test_getitem_scatters_gradient_back():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with GradTape() as tape:
        y = nx.sum_(x[[0, 0, 2]])
    backward(y, tape)
    assert x.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]
