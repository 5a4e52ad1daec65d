"""Exactness checks for the hand-rolled MLP backprop and AdamW."""

import numpy as np
import pytest

from specflow import nets
from specflow.nets import (
    Mlp,
    OptimState,
    adamw_step,
    backward,
    flop_count,
    forward,
    grad_list,
    init_mlp,
    init_optim,
    n_params,
    optim_step,
    parameters,
)


def finite_difference_grads(net, x, loss_fn, step=1e-5):
    """Central differences over every parameter; the independent oracle."""
    grads = []
    for p in parameters(net):
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            up = loss_fn(forward(net, x)[0])
            p[idx] = orig - step
            down = loss_fn(forward(net, x)[0])
            p[idx] = orig
            g[idx] = (up - down) / (2 * step)
            it.iternext()
        grads.append(g)
    return grads


def analytic_grads(net, x, loss_fn, loss_grad_fn):
    out, tape = forward(net, x)
    grads, _ = backward(net, tape, loss_grad_fn(out))
    return grad_list(grads)


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class TestForward:
    def test_zero_net_outputs_zero(self):
        net = Mlp(weights=[np.zeros((4, 3)), np.zeros((2, 4))], biases=[np.zeros(4), np.zeros(2)])
        out, _ = forward(net, np.array([1.0, -2.0, 3.0]))
        assert np.array_equal(out, np.zeros(2))

    def test_single_linear_identity_layer(self):
        net = Mlp(weights=[np.eye(3)], biases=[np.zeros(3)])
        x = np.array([0.5, -1.5, 2.0])
        out, _ = forward(net, x)
        assert np.array_equal(out, x)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        net = init_mlp([5, 8, 3], rng)
        x = rng.standard_normal(5)
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert np.array_equal(a, b)

    def test_dimension_mismatch_raises(self):
        net = init_mlp([5, 3], np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(net, np.zeros(4))

    def test_batched_forward_matches_loop(self):
        rng = np.random.default_rng(1)
        net = init_mlp([4, 7, 2], rng)
        xs = rng.standard_normal((6, 4))
        batch, _ = forward(net, xs)
        rows = np.stack([forward(net, x)[0] for x in xs])
        assert np.allclose(batch, rows, atol=1e-15, rtol=0)


class TestBackward:
    def test_linear_identity_gradient_closed_form(self):
        # loss ||f(x)||^2 / 2 with f = identity: dW = x x^T
        net = Mlp(weights=[np.eye(3)], biases=[np.zeros(3)])
        x = np.array([1.0, 2.0, -1.0])
        out, tape = forward(net, x)
        grads, _ = backward(net, tape, out)  # d(loss)/d(out) = out
        assert np.allclose(grads.d_weights[0], np.outer(x, x))
        assert np.allclose(grads.d_biases[0], x)

    def test_zero_output_gradient_gives_zero_grads(self):
        net = init_mlp([4, 6, 2], np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal(4)
        out, tape = forward(net, x)
        grads, gin = backward(net, tape, np.zeros_like(out))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grad_list(grads))
        assert np.array_equal(gin, np.zeros(4))

    def test_three_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        net = init_mlp([5, 8, 6, 3], rng)
        x = rng.standard_normal(5)

        def loss(out):
            return 0.5 * float(np.sum(out**2))

        numeric = finite_difference_grads(net, x, loss)
        analytic = analytic_grads(net, x, loss, lambda out: out)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        net = init_mlp([4, 6, 2], rng)
        x = rng.standard_normal(4)
        out, tape = forward(net, x)
        _, gin = backward(net, tape, out)
        step = 1e-6
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += step
            xm[i] -= step
            up = 0.5 * np.sum(forward(net, xp)[0] ** 2)
            down = 0.5 * np.sum(forward(net, xm)[0] ** 2)
            assert abs(gin[i] - (up - down) / (2 * step)) < 1e-6


class TestAdamW:
    def test_zero_gradient_no_decay_leaves_params(self):
        net = init_mlp([3, 4, 2], np.random.default_rng(5))
        before = [p.copy() for p in parameters(net)]
        state = init_optim(parameters(net), lr=0.1, weight_decay=0.0)
        adamw_step(parameters(net), [np.zeros_like(p) for p in parameters(net)], state)
        for p, b in zip(parameters(net), before):
            assert np.array_equal(p, b)

    def test_zero_gradient_decoupled_decay_scales(self):
        net = init_mlp([3, 4, 2], np.random.default_rng(6))
        before = [p.copy() for p in parameters(net)]
        lr, wd = 0.05, 0.2
        state = init_optim(parameters(net), lr=lr, weight_decay=wd)
        adamw_step(parameters(net), [np.zeros_like(p) for p in parameters(net)], state)
        for p, b in zip(parameters(net), before):
            assert np.allclose(p, b * (1.0 - lr * wd), atol=1e-15, rtol=0)

    def test_first_step_magnitude_is_lr(self):
        # hand-computed: m_hat = g, v_hat = g^2 -> step = lr * g/(|g| + eps)
        w = np.array([0.0])
        lr = 1e-3
        state = init_optim([w], lr=lr, weight_decay=0.0)
        adamw_step([w], [np.array([1.0])], state)
        assert abs(w[0] + lr) < 1e-10

    def test_step_counter_increments(self):
        w = np.array([1.0])
        state = init_optim([w], lr=0.01)
        for expected in (1, 2, 3):
            adamw_step([w], [np.array([0.5])], state)
            assert state.step == expected

    def test_optim_step_wrapper(self):
        net = init_mlp([2, 2], np.random.default_rng(7))
        x = np.array([1.0, -1.0])
        out, tape = forward(net, x)
        grads, _ = backward(net, tape, out)
        state = init_optim(parameters(net), lr=0.01)
        net2, state2 = optim_step(net, grads, state)
        assert net2 is net and state2 is state and state.step == 1

    def test_quadratic_toy_loss_non_increasing(self):
        # fixed quadratic: loss = ||W x - y||^2 / 2 at small lr
        rng = np.random.default_rng(11)
        net = init_mlp([4, 4], rng)
        x = rng.standard_normal(4)
        y = rng.standard_normal(4)
        state = init_optim(parameters(net), lr=1e-4)
        losses = []
        for _ in range(10):
            out, tape = forward(net, x)
            losses.append(0.5 * float(np.sum((out - y) ** 2)))
            grads, _ = backward(net, tape, out - y)
            adamw_step(parameters(net), grad_list(grads), state)
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_param_and_flop_counts():
    net = init_mlp([10, 20, 5], np.random.default_rng(0))
    assert n_params(net) == 10 * 20 + 20 + 20 * 5 + 5
    assert flop_count(net) == 2 * 10 * 20 + 2 * 20 + 2 * 20 * 5 + 2 * 5


def test_shape_mismatch_in_adamw_raises():
    w = np.zeros(3)
    state = init_optim([w], lr=0.1)
    with pytest.raises(ValueError):
        adamw_step([w], [np.zeros(4)], state)
