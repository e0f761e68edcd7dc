import math

import numpy as np
import pytest

from grec.tensor import (
    ContractError,
    DimensionError,
    DomainError,
    Tensor,
    backward,
    concat,
    grad_check,
    layer_norm,
    log_softmax,
    logsumexp,
    matmul,
    maximum,
    minimum,
    sigmoid,
    softmax,
    stack,
    where,
)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    big = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_slices_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(scale=20, size=(5, 7, 3)))
    for axis in range(3):
        s = softmax(x, axis=axis).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)


def test_sigmoid_range():
    x = np.linspace(-30, 30, 201)
    s = sigmoid(Tensor(x)).data
    assert np.all((s > 0) & (s < 1))
    assert np.all(np.isfinite(sigmoid(Tensor([-1e4, 1e4])).data))


def test_backward_sum_and_square():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    grads = backward(x.sum())
    np.testing.assert_array_equal(grads[x], [1.0, 1.0, 1.0])
    y = Tensor(3.0, requires_grad=True)
    backward(y * y)
    assert y.grad == pytest.approx(6.0)


def test_backward_needs_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_releases_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    backward(y)
    assert y._parents == ()


def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(2).normal(size=6))
    assert grad_check(lambda t: (t * t).sum(), x, eps=1e-5) < 1e-8


def test_grad_check_constant_function():
    x = Tensor(np.ones(3))
    assert grad_check(lambda t: Tensor(4.0), x) == 0.0


def test_grad_check_rejects_bad_eps_and_nonfinite():
    x = Tensor(np.ones(2))
    with pytest.raises(ContractError):
        grad_check(lambda t: t.sum(), x, eps=1e-2)
    with pytest.raises(DomainError):
        grad_check(lambda t: (t * np.inf).sum(), x)


def test_grad_check_detects_wrong_gradient():
    """A deliberately corrupted backward rule must be caught."""

    def bad_square(t):
        out = Tensor._make(t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,))
        return out.sum()

    x = Tensor(np.random.default_rng(3).normal(size=4))
    assert grad_check(bad_square, x) > 1e-2


# every differentiable op, evaluated on inputs inside its domain
W = np.random.default_rng(99).normal(size=(3, 4, 5))

OPS = {
    "add": lambda a: (a + a * 0.5 + 1.0).sum(),
    "sub_rsub": lambda a: ((1.0 - a) - a * 2.0).sum(),
    "mul": lambda a: (a * W[0, :, :3].reshape(-1)[: a.size].reshape(a.shape) * a).sum(),
    "div": lambda a: (1.0 / (a * a + 1.0) + a / 3.0).sum(),
    "pow": lambda a: ((a * a + 0.5) ** 1.5).sum(),
    "neg": lambda a: (-a).sum(),
    "exp_log": lambda a: ((a.exp() + 1.0).log()).sum(),
    "sqrt": lambda a: ((a * a + 1.0).sqrt()).sum(),
    "abs": lambda a: (a.abs() * a).sum(),
    "tanh": lambda a: a.tanh().sum(),
    "relu": lambda a: (a.relu() * a).sum(),
    "sigmoid": lambda a: (sigmoid(a) * a).sum(),
    "clip": lambda a: (a.clip(-0.5, 0.5) * a).sum(),
    "matmul": lambda a: (matmul(a.reshape(3, 4), Tensor(W[0, :, :])) ** 2).sum(),
    "batched_matmul": lambda a: (
        matmul(a.reshape(3, 1, 4).broadcast_to((3, 2, 4)), Tensor(W[:, :, :2])) ** 2
    ).sum(),
    "softmax": lambda a: (softmax(a.reshape(3, 4), axis=1) * Tensor(W[0, :3, :4])).sum(),
    "softmax_axis0": lambda a: (softmax(a.reshape(3, 4), axis=0) * Tensor(W[1, :3, :4])).sum(),
    "log_softmax": lambda a: (log_softmax(a.reshape(3, 4), axis=-1) * Tensor(W[0, :3, :4])).sum(),
    "logsumexp": lambda a: logsumexp(a.reshape(3, 4), axis=1).sum(),
    "sum_mean": lambda a: (a.reshape(3, 4).sum(axis=0) * a.reshape(3, 4).mean(axis=1).sum()).sum(),
    "transpose": lambda a: (a.reshape(3, 4).T * Tensor(W[0, :, :3])).sum(),
    "getitem": lambda a: (a[np.array([0, 2, 2, 5])] * a[1:4].sum()).sum(),
    "concat_stack": lambda a: (concat([a[:6], a[6:] * 2.0]) * stack([a, a * a]).sum(axis=0)).sum(),
    "maximum_minimum": lambda a: (maximum(a, a * 0.3) + minimum(a, -a) * a).sum(),
    "where": lambda a: where(np.arange(12) % 2 == 0, a * a, a * 3.0).sum(),
    "layer_norm": lambda a: (
        layer_norm(a.reshape(3, 4), Tensor(W[0, 0, :4]), Tensor(W[0, 1, :4])) * Tensor(W[1, :3, :4])
    ).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_chain_rule_every_op(name):
    f = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.normal(size=12))
        worst = max(worst, grad_check(f, x, eps=1e-6))
    assert worst < 1e-4


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        out = (softmax(matmul(a, b), axis=-1) * 3.0).sum()
        backward(out)
        return out.data.copy(), a.grad.copy(), b.grad.copy()

    r1, r2 = run(), run()
    for x, y in zip(r1, r2):
        assert np.array_equal(x, y)


def test_broadcast_gradient_reduces_to_operand_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    backward((a * b).sum())
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, [3.0] * 4)
