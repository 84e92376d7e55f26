"""Autodiff engine: forward values, gradients, optimizers, error paths."""

import numpy as np
import pytest

from gues.rng import BoxMuller, substream
from gues.tensor import (AdamState, MissingGradient, NonScalarLoss,
                         OptimizerState, ShapeMismatch, Tensor, adam_step, add,
                         backward, clamp, concat, conv2d, conv2d_transpose,
                         exp, gaussian_noise_like, grad_check, graph_dump,
                         leaky_relu, log, matmul, mul, no_grad, relu, reshape,
                         sgd_step, sigmoid, softmax, sub, tanh, tmean, tsum)


def rand(shape, key=0):
    return substream(11, key).random(shape) + 0.1


# ---------------------------------------------------------------------------
# forward values


def test_conv2d_all_ones_dot_product():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_matmul_identity():
    v = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = matmul(v, Tensor(np.eye(3)))
    assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_softmax_uniform_by_symmetry():
    out = softmax(Tensor(np.zeros((1, 5))), axis=1)
    assert np.allclose(out.data, 0.2, atol=0, rtol=0)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-12)


def test_elementwise_forward_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    assert np.array_equal(relu(x).data, [0.0, 0.0, 2.0])
    assert np.array_equal(leaky_relu(x, 0.2).data, [-0.2, 0.0, 2.0])
    assert np.allclose(sigmoid(x).data, 1.0 / (1.0 + np.exp([1.0, 0.0, -2.0])))
    assert np.allclose(tanh(x).data, np.tanh([-1.0, 0.0, 2.0]))
    y = Tensor(np.array([0.5, 1.0, 2.0]))
    assert np.allclose(exp(y).data, np.exp(y.data))
    assert np.allclose(log(y).data, np.log(y.data))
    assert np.array_equal(clamp(x, -0.5, 0.5).data, [-0.5, 0.0, 0.5])


def test_reductions_and_shape_ops():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    assert tsum(x).data == pytest.approx(66.0)
    assert tmean(x).data == pytest.approx(5.5)
    assert np.array_equal(tsum(x, axis=0).data, [12.0, 15.0, 18.0, 21.0])
    assert reshape(x, (4, 3)).shape == (4, 3)
    both = concat([x, x], axis=0)
    assert both.shape == (6, 4)


# ---------------------------------------------------------------------------
# gradients


def test_grad_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(tsum(mul(x, x)))
    assert np.array_equal(x.grad, [2.0, -4.0, 6.0])


def test_grad_mean():
    x = Tensor(np.ones(4), requires_grad=True)
    backward(tmean(x))
    assert np.array_equal(x.grad, [0.25, 0.25, 0.25, 0.25])


def test_grad_broadcast_add():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    b = Tensor(np.zeros((1, 3)), requires_grad=True)
    backward(tsum(add(a, b)))
    assert a.grad.shape == (2, 3) and np.all(a.grad == 1.0)
    assert b.grad.shape == (1, 3) and np.all(b.grad == 2.0)


@pytest.mark.parametrize("name,f,x0", [
    ("relu", lambda x: tsum(relu(x)), rand((4, 5), 1) - 0.5),
    ("leaky_relu", lambda x: tsum(leaky_relu(x)), rand((4, 5), 2) - 0.5),
    ("sigmoid", lambda x: tsum(sigmoid(x)), rand((3, 3), 3)),
    ("tanh", lambda x: tsum(tanh(x)), rand((3, 3), 4)),
    ("exp", lambda x: tsum(exp(x)), rand((3, 3), 5)),
    ("log", lambda x: tsum(log(x)), rand((3, 3), 6) + 0.5),
    ("softmax", lambda x: tsum(mul(softmax(x, axis=1), softmax(x, axis=1))),
     rand((3, 4), 7)),
    ("sub_mul", lambda x: tsum(mul(sub(x, Tensor(np.full((3, 3), 0.3))), x)),
     rand((3, 3), 8)),
    ("reshape", lambda x: tsum(mul(reshape(x, (9,)), reshape(x, (9,)))),
     rand((3, 3), 9)),
    ("clamp", lambda x: tsum(clamp(x, 0.2, 0.8)), rand((4, 4), 10)),
    ("matmul", lambda x: tsum(matmul(x, x)), rand((3, 3), 11)),
])
def test_finite_difference_gradients(name, f, x0):
    report = grad_check(f, Tensor(x0, requires_grad=True), tol=1e-4)
    assert report.passed, f"{name}: {report.errors}"


def test_conv_gradients():
    x = Tensor(rand((2, 2, 6, 6), 12), requires_grad=True)
    w = Tensor(0.3 * (rand((3, 2, 3, 3), 13) - 0.5), requires_grad=True)

    def f_x(t):
        return tsum(mul(conv2d(t, w, stride=2, padding=1),
                        conv2d(t, w, stride=2, padding=1)))

    assert grad_check(f_x, x, tol=1e-4).passed
    wt = Tensor(0.3 * (rand((2, 3, 3, 3), 14) - 0.5), requires_grad=True)
    xt = Tensor(rand((1, 2, 3, 3), 15))

    def f_w(t):
        out = conv2d_transpose(xt, t, stride=2, padding=1, output_padding=1)
        return tsum(mul(out, out))

    assert grad_check(f_w, wt, tol=1e-4).passed


def test_concat_gradient_splits():
    a = Tensor(rand((2, 3), 16), requires_grad=True)
    b = Tensor(rand((2, 3), 17), requires_grad=True)
    backward(tsum(mul(concat([a, b], axis=0), concat([a, b], axis=0))))
    assert np.allclose(a.grad, 2.0 * a.data)
    assert np.allclose(b.grad, 2.0 * b.data)


def test_gaussian_noise_like_is_constant_wrt_graph():
    x = Tensor(rand((2, 3), 18), requires_grad=True)
    noise = gaussian_noise_like(x, BoxMuller(substream(0, 3)))
    assert noise.shape == x.shape
    backward(tsum(mul(add(x, noise), add(x, noise))))
    assert np.allclose(x.grad, 2.0 * (x.data + noise.data))


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_plain_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    sgd_step([p], OptimizerState([p], learning_rate=0.1, momentum=0.0))
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_momentum_recurrence():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = OptimizerState([p], learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], state)
    # v1 = 1, v2 = 1.9 -> p = -0.1 - 0.19
    assert p.data[0] == pytest.approx(-0.29)


def test_sgd_zero_grad_leaves_param():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([0.0])
    sgd_step([p], OptimizerState([p], learning_rate=0.1, momentum=0.0))
    assert p.data[0] == 0.5


def test_sgd_missing_gradient_raises():
    p = Tensor(np.array([0.5]), requires_grad=True)
    with pytest.raises(MissingGradient):
        sgd_step([p], OptimizerState([p], learning_rate=0.1))


def test_adam_first_step_matches_hand_computation():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState([p], learning_rate=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad = np.array([2.0])
    adam_step([p], state)
    # bias-corrected m_hat = 2, v_hat = 4 -> p -= 0.1 * 2 / (2 + 1e-8)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-12)
    assert p.grad is None


def test_adam_two_steps_match_reference_recurrence():
    p = Tensor(np.array([0.3]), requires_grad=True)
    state = AdamState([p], learning_rate=0.05)
    grads = [1.5, -0.5]
    ref, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        p.grad = np.array([g])
        adam_step([p], state)
    assert p.data[0] == pytest.approx(ref, abs=1e-12)


def test_adam_validates_hyperparameters():
    p = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(ValueError):
        AdamState([p], learning_rate=0.0)
    with pytest.raises(ValueError):
        AdamState([p], learning_rate=0.1, beta1=1.0)


# ---------------------------------------------------------------------------
# error paths and graph utilities


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        backward(mul(x, x))


def test_add_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tsum(mul(x, x))
    backward(y)   # detached scalar: nothing to propagate
    assert x.grad is None


def test_graph_dump_names_primitives():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    text = graph_dump(tsum(mul(x, x)))
    assert "mul" in text and "sum" in text
