"""Draft model proposal and prefix-weighted training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specflow.actions import ChannelLayout
from specflow.draft import (
    DraftModel,
    DraftTrainConfig,
    prefix_weights,
    propose,
    smooth_l1,
    smooth_l1_grad,
    teacher_targets,
    train_draft,
)
from specflow.flowpolicy import Observation, ObsNormalizer, straight_line_field
from specflow.nets import Mlp, init_mlp

LAYOUT = ChannelLayout(pos_dims=2, rot_dims=0)


def make_model(horizon=4, hidden=(16,), seed=0, world_dim=3, n_tasks=2):
    rng = np.random.default_rng(seed)
    in_dim = world_dim + n_tasks + 2
    return DraftModel(
        net=init_mlp([in_dim, *hidden, horizon * LAYOUT.dim], rng),
        layout=LAYOUT,
        horizon=horizon,
        n_tasks=n_tasks,
        normalizer=ObsNormalizer.identity(world_dim, 2),
    )


def obs(world=(0.0, 0.0, 0.0), task=0, state=(0.0, 0.0)):
    return Observation(
        world_features=np.asarray(world, dtype=float),
        task_id=task,
        robot_state=np.asarray(state, dtype=float),
    )


class TestPropose:
    def test_zero_net_proposes_zero_chunk(self):
        model = make_model()
        for w in model.net.weights:
            w[...] = 0.0
        chunk = propose(model, obs())
        assert np.array_equal(chunk.values, np.zeros((4, 3)))
        assert chunk.space == "standardized"

    def test_deterministic(self):
        model = make_model(seed=3)
        a = propose(model, obs(world=(1.0, -1.0, 2.0)))
        b = propose(model, obs(world=(1.0, -1.0, 2.0)))
        assert np.array_equal(a.values, b.values)

    def test_unknown_task(self):
        model = make_model(n_tasks=2)
        with pytest.raises(ValueError):
            propose(model, obs(task=5))

    def test_single_forward_pass_shape(self):
        model = make_model(horizon=50)
        assert propose(model, obs()).horizon == 50


class TestSmoothL1:
    def test_zero_distance(self):
        assert smooth_l1(1.0, 1.0, beta=1.0) == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(0.5, 0.0, beta=1.0) == pytest.approx(0.125)

    def test_linear_branch(self):
        assert smooth_l1(2.0, 0.0, beta=1.0) == pytest.approx(1.5)

    def test_gradient_branches(self):
        assert smooth_l1_grad(0.5, 0.0, beta=1.0) == pytest.approx(0.5)
        assert smooth_l1_grad(2.0, 0.0, beta=1.0) == pytest.approx(1.0)
        assert smooth_l1_grad(-2.0, 0.0, beta=1.0) == pytest.approx(-1.0)

    def test_vectorized(self):
        out = smooth_l1(np.array([0.0, 0.5, 2.0]), np.zeros(3), beta=1.0)
        assert np.allclose(out, [0.0, 0.125, 1.5])


class TestPrefixWeights:
    def test_full_prefix_is_geometric_ramp(self):
        w = prefix_weights(4, 4, gamma_prefix=0.9, tail_weight=0.1)
        assert np.allclose(w, [1.0, 0.9, 0.81, 0.729])
        assert w[0] == 1.0

    def test_unit_gamma_and_tail_gives_uniform(self):
        w = prefix_weights(2, 5, gamma_prefix=1.0, tail_weight=1.0)
        assert np.array_equal(w, np.ones(5))

    def test_hand_case(self):
        w = prefix_weights(2, 4, gamma_prefix=0.9, tail_weight=0.1)
        assert np.allclose(w, [1.0, 0.9, 0.1, 0.1])

    def test_bounds(self):
        with pytest.raises(ValueError):
            prefix_weights(0, 4, 0.9, 0.1)
        with pytest.raises(ValueError):
            prefix_weights(5, 4, 0.9, 0.1)

    @given(st.integers(1, 30), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_non_increasing_property(self, horizon, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(1, horizon + 1))
        gamma = float(rng.uniform(0.5, 1.0))
        tail = float(rng.uniform(0.0, gamma ** (p - 1)))
        w = prefix_weights(p, horizon, gamma, tail)
        assert np.all(np.diff(w) <= 1e-12)


class TestTrainDraft:
    def test_loss_zero_when_output_equals_target(self):
        target = np.zeros((1, 4, 3))
        w = prefix_weights(2, 4, 0.9, 0.1)
        per_elem = smooth_l1(target, target, 1.0)
        loss = np.sum(w[None, :] * per_elem.mean(axis=2))
        assert loss == 0.0

    def test_degenerate_single_target(self):
        # one (feature, chunk) pair: the draft should reproduce it closely
        rng = np.random.default_rng(8)
        h = 16
        model = make_model(horizon=h, hidden=(24,), seed=9)
        target = rng.normal(scale=0.5, size=(1, h, 3))
        features = np.tile(model.features(obs(world=(0.5, -0.5, 1.0))), (1, 1))
        cfg = DraftTrainConfig(epochs=300, learning_rate=5e-3, max_prefix=12, val_fraction=0.0)
        _, curve = train_draft(model, features, target, cfg, rng)
        pred = propose(model, obs(world=(0.5, -0.5, 1.0)))
        rms = float(np.sqrt(np.mean((pred.values[:12] - target[0, :12]) ** 2)))
        assert rms < 0.05

    def test_selection_metric_uses_first_12_steps_only(self):
        # with zero tail weight and max_prefix 12, steps beyond 12 cannot touch
        # training; corrupting them must leave the validation RMS curve intact
        rng = np.random.default_rng(10)
        h = 20
        n = 20
        base = make_model(horizon=h, seed=11)
        features = rng.normal(size=(n, base.net.in_dim))
        targets = rng.normal(size=(n, h, 3)) * 0.1
        corrupted = targets.copy()
        corrupted[:, 12:, :] += 100.0
        cfg = DraftTrainConfig(epochs=3, select_steps=12, max_prefix=12, tail_weight=0.0)

        model_a = make_model(horizon=h, seed=11)
        _, curve_a = train_draft(model_a, features, targets, cfg, np.random.default_rng(77))
        model_b = make_model(horizon=h, seed=11)
        _, curve_b = train_draft(model_b, features, corrupted, cfg, np.random.default_rng(77))
        assert curve_a == curve_b

        # sanity: widening the selection window does expose the corruption
        wide = DraftTrainConfig(epochs=3, select_steps=h, max_prefix=12, tail_weight=0.0)
        model_c = make_model(horizon=h, seed=11)
        _, curve_c = train_draft(model_c, features, corrupted, wide, np.random.default_rng(77))
        assert curve_c != curve_a

    def test_teacher_mode_never_reads_demo_actions(self):
        # teacher targets depend only on the observations and the main policy
        rng = np.random.default_rng(12)
        h = 4
        target = rng.normal(size=(h, 3))
        field = straight_line_field(target, layout=LAYOUT)
        from specflow.flowpolicy import ContextEncoder, DenoiseConfig

        enc = ContextEncoder(
            net=init_mlp([5, 8, 4], np.random.default_rng(1)),
            n_tasks=2,
            normalizer=ObsNormalizer.identity(3, 2),
        )
        enc_inputs = rng.normal(size=(6, 5))
        states = rng.normal(size=(6, 2))
        a = teacher_targets(field, enc, enc_inputs, states, DenoiseConfig(), seed=5)
        b = teacher_targets(field, enc, enc_inputs, states, DenoiseConfig(), seed=5)
        assert np.array_equal(a, b)
        # bit-identical draft training given teacher targets, regardless of demos
        model_a = make_model(seed=20)
        model_b = make_model(seed=20)
        cfg = DraftTrainConfig(epochs=5)
        features = rng.normal(size=(6, model_a.net.in_dim))
        train_draft(model_a, features, a, cfg, np.random.default_rng(9))
        train_draft(model_b, features, b, cfg, np.random.default_rng(9))
        for wa, wb in zip(model_a.net.weights, model_b.net.weights):
            assert np.array_equal(wa, wb)

    def test_empty_dataset_rejected(self):
        model = make_model()
        with pytest.raises(ValueError):
            train_draft(
                model,
                np.zeros((0, model.net.in_dim)),
                np.zeros((0, 4, 3)),
                DraftTrainConfig(epochs=1),
                np.random.default_rng(0),
            )

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            DraftTrainConfig(target_source="nonsense")
        with pytest.raises(ValueError):
            DraftTrainConfig(max_prefix=0)
