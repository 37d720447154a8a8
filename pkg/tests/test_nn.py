import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fairwos import nn


def test_linear_identity():
    w = np.array([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(nn.linear_forward(np.eye(2), w), w)


def test_linear_hand_value():
    assert nn.linear_forward(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_linear_shape_mismatch():
    with pytest.raises(nn.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nn.linear_forward(np.ones((2, 3)), np.ones((2, 3)))


def test_linear_rejects_nan():
    with pytest.raises(nn.NonFiniteError):
        nn.linear_forward(np.array([[np.nan]]), np.ones((1, 1)))


def test_activations():
    assert np.allclose(nn.activation(np.zeros((1, 4)), "softmax-rows"), 0.25)
    assert nn.activation(np.array([0.0]), "sigmoid")[0] == 0.5
    assert nn.activation(np.array([-1.0, 2.0]), "relu").tolist() == [0.0, 2.0]
    with pytest.raises(nn.NonFiniteError):
        nn.activation(np.array([np.inf]), "relu")


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = nn.activation(x, "softmax-rows")
    assert np.all(np.abs(s.sum(1) - 1.0) <= 1e-12)


def test_cross_entropy_half():
    loss = nn.cross_entropy_loss(np.array([0.5]), np.array([1]), np.array([True]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_perfect():
    loss = nn.cross_entropy_loss(np.array([1.0, 0.0]), np.array([1, 0]), np.array([True, True]))
    assert 0 <= loss <= 1e-11


def test_cross_entropy_averages():
    p, y = np.array([0.3, 0.8]), np.array([1, 0])
    a = nn.cross_entropy_loss(p[:1], y[:1], [True])
    b = nn.cross_entropy_loss(p[1:], y[1:], [True])
    assert nn.cross_entropy_loss(p, y, [True, True]) == pytest.approx((a + b) / 2, rel=1e-14)


def test_cross_entropy_multiclass():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    loss = nn.cross_entropy_loss(p, np.array([1, 0]), [True, True])
    assert loss == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2)


def test_cross_entropy_empty_mask():
    with pytest.raises(ValueError, match="no labeled nodes"):
        nn.cross_entropy_loss(np.array([0.5]), np.array([1]), np.array([False]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0, 1)), arrays(np.int64, 6, elements=st.integers(0, 1)))
def test_cross_entropy_nonnegative(p, y):
    assert nn.cross_entropy_loss(p, y, np.ones(6, bool)) >= 0


def _one_param(value, grad):
    ps = nn.ParameterSet({"p": np.array([value])})
    ps.grads["p"][:] = grad
    return ps


def test_sgd_step():
    ps = _one_param(1.0, 2.0)
    nn.optimizer_step(ps, nn.Optimizer(nn.OptimizerConfig("sgd", 0.1)))
    assert ps["p"][0] == pytest.approx(0.8)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_fixed_point(kind):
    ps = _one_param(1.0, 0.0)
    opt = nn.Optimizer(nn.OptimizerConfig(kind, 0.1))
    for _ in range(5):
        opt.step(ps)
    assert ps["p"][0] == 1.0


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_lr_identity(kind):
    ps = nn.ParameterSet({"a": np.arange(6.0).reshape(2, 3)})
    ps.grads["a"][:] = 1.7
    before = ps.copy()
    nn.Optimizer(nn.OptimizerConfig(kind, 0.0)).step(ps)
    assert ps.equal(before)


def test_adam_constant_gradient_step_size():
    lr = 0.01
    ps = _one_param(0.0, 0.0)
    opt = nn.Optimizer(nn.OptimizerConfig("adam", lr))
    prev = 0.0
    for _ in range(1000):
        ps.grads["p"][:] = 3.0
        opt.step(ps)
        step = prev - ps["p"][0]
        prev = ps["p"][0]
    assert abs(step - lr) <= 0.05 * lr


def test_nonfinite_gradient_named():
    ps = nn.ParameterSet({"weights": np.zeros(2)})
    ps.grads["weights"][0] = np.nan
    with pytest.raises(nn.NonFiniteError, match="weights"):
        nn.Optimizer().step(ps)


def test_duplicate_parameter_name():
    ps = nn.ParameterSet({"a": np.zeros(1)})
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))


class LogisticProgram(nn.DifferentiableProgram):
    """linear + sigmoid + binary cross-entropy."""

    def __init__(self, x, y):
        self.x, self.y = x, y

    def forward(self, params):
        self.logits = (self.x @ params["w"]).ravel() + params["b"][0]
        self.loss, self.dl = nn.binary_ce_with_logits(self.logits, self.y, np.ones(len(self.y), bool))
        return self.loss

    def backward(self, params):
        params.grads["w"] += self.x.T @ self.dl[:, None]
        params.grads["b"] += self.dl.sum()
        # "unused" never enters the loss


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_logistic(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 2, 5)
    ps = nn.ParameterSet({"w": rng.standard_normal((3, 1)), "b": rng.standard_normal(1),
                          "unused": rng.standard_normal((2, 2))})
    rep = nn.grad_check(LogisticProgram(x, y), ps, tol=1e-4)
    assert rep.passed, rep.max_rel_error
    assert rep.max_rel_error["unused"] == 0.0


class SoftmaxProgram(nn.DifferentiableProgram):
    def __init__(self, x, y):
        self.x, self.y = x, y

    def forward(self, params):
        pre = self.x @ params["W1"]
        self.pre, self.z = pre, nn.activation(pre, "relu")
        logits = self.z @ params["W2"]
        loss, self.dl = nn.softmax_ce_with_logits(logits, self.y, np.ones(len(self.y), bool))
        return loss

    def backward(self, params):
        params.grads["W2"] += self.z.T @ self.dl
        dz = self.dl @ params["W2"].T
        params.grads["W1"] += self.x.T @ nn.activation_backward(dz, self.pre, self.z, "relu")


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_relu_softmax(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((7, 4))
    y = rng.integers(0, 3, 7)
    ps = nn.ParameterSet({"W1": rng.standard_normal((4, 5)), "W2": rng.standard_normal((5, 3))})
    assert nn.grad_check(SoftmaxProgram(x, y), ps).passed


def test_grad_check_detects_wrong_gradient():
    class Wrong(LogisticProgram):
        def backward(self, params):
            super().backward(params)
            params.grads["w"] *= 1.5

    rng = np.random.default_rng(0)
    ps = nn.ParameterSet({"w": rng.standard_normal((3, 1)), "b": np.zeros(1)})
    rep = nn.grad_check(Wrong(rng.standard_normal((5, 3)), rng.integers(0, 2, 5)), ps)
    assert not rep.passed


def test_glorot_bounds():
    w = nn.glorot_uniform(np.random.default_rng(0), 10, 6)
    assert np.abs(w).max() <= np.sqrt(6 / 16)
