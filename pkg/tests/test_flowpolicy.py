"""Encoder, velocity field, Euler integration, and flow-matching training."""

import numpy as np
import pytest

from specflow.actions import ChannelLayout, Standardizer
from specflow.flowpolicy import (
    ConditioningCache,
    ContextEncoder,
    DenoiseConfig,
    FlowTrainConfig,
    Observation,
    ObsNormalizer,
    VelocityField,
    constant_field,
    denoise,
    encode_context,
    fit_flow_field,
    flow_batch,
    integrate_flow,
    straight_line_field,
    velocity,
)
from specflow.nets import Mlp, init_mlp

LAYOUT = ChannelLayout(pos_dims=2, rot_dims=0)
EMPTY_CACHE = ConditioningCache(embedding=np.zeros(0))
NO_STATE = np.zeros(0)


def make_encoder(world_dim=3, n_tasks=2, embed=4, seed=0):
    rng = np.random.default_rng(seed)
    return ContextEncoder(
        net=init_mlp([world_dim + n_tasks, 8, embed], rng),
        n_tasks=n_tasks,
        normalizer=ObsNormalizer.identity(world_dim, 2),
    )


def obs(world, task=0, state=(0.0, 0.0)):
    return Observation(
        world_features=np.asarray(world, dtype=float),
        task_id=task,
        robot_state=np.asarray(state, dtype=float),
    )


class TestEncoder:
    def test_deterministic(self):
        enc = make_encoder()
        o = obs([1.0, 2.0, 3.0])
        a = encode_context(enc, o)
        b = encode_context(enc, o)
        assert np.array_equal(a.embedding, b.embedding)

    def test_robot_state_not_baked_in(self):
        enc = make_encoder()
        a = encode_context(enc, obs([1.0, 2.0, 3.0], state=(0.0, 0.0)))
        b = encode_context(enc, obs([1.0, 2.0, 3.0], state=(9.0, -9.0)))
        assert np.array_equal(a.embedding, b.embedding)

    def test_world_features_matter(self):
        enc = make_encoder()
        a = encode_context(enc, obs([1.0, 2.0, 3.0]))
        b = encode_context(enc, obs([1.0, 2.0, 3.5]))
        assert not np.array_equal(a.embedding, b.embedding)

    def test_unknown_task_rejected(self):
        enc = make_encoder(n_tasks=2)
        with pytest.raises(ValueError):
            encode_context(enc, obs([1.0, 2.0, 3.0], task=2))

    def test_capture_metadata(self):
        enc = make_encoder()
        cache = encode_context(enc, obs([0.0, 0.0, 0.0]), round_index=4, tick=77)
        assert cache.captured_round == 4 and cache.captured_tick == 77


class TestVelocity:
    def test_zero_weight_net_gives_zero_velocity_at_origin(self):
        # endpoint-form field: a zero net predicts the zero endpoint, so the
        # velocity vanishes exactly at the zero state
        h, d = 4, 3
        net = Mlp(
            weights=[np.zeros((h * d, h * d + 1))], biases=[np.zeros(h * d)]
        )
        field = VelocityField(net=net, horizon=h, dim=d, emb_dim=0, state_dim=0, layout=LAYOUT)
        out = velocity(field, np.zeros((h, d)), 0.5, EMPTY_CACHE, NO_STATE)
        assert np.array_equal(out, np.zeros((h, d)))
        # and pulls any other state straight toward that endpoint
        pulled = velocity(field, np.ones((h, d)), 0.5, EMPTY_CACHE, NO_STATE)
        assert np.allclose(pulled, -2.0 * np.ones((h, d)))

    def test_tau_out_of_range(self):
        field = constant_field(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            velocity(field, np.zeros((2, 3)), 1.5, EMPTY_CACHE, NO_STATE)

    def test_shape_mismatch(self):
        field = constant_field(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            velocity(field, np.zeros((3, 3)), 0.5, EMPTY_CACHE, NO_STATE)

    def test_eval_counter(self):
        field = constant_field(np.zeros((2, 3)))
        velocity(field, np.zeros((2, 3)), 0.5, EMPTY_CACHE, NO_STATE)
        velocity(field, np.zeros((2, 3)), 0.25, EMPTY_CACHE, NO_STATE)
        assert field.eval_count == 2


class TestIntegration:
    @pytest.mark.parametrize("n", [1, 2, 7, 10])
    def test_constant_field_exact(self, n):
        rng = np.random.default_rng(5)
        c = rng.standard_normal((3, 3))
        field = constant_field(c, layout=LAYOUT)
        start = np.random.default_rng(123).standard_normal((3, 3))
        out = integrate_flow(
            field, EMPTY_CACHE, NO_STATE, DenoiseConfig(num_steps=n),
            np.random.default_rng(123),
        )
        assert np.max(np.abs(out - (start + c))) <= 1e-12

    @pytest.mark.parametrize("n", [1, 3, 10])
    def test_straight_line_field_hits_target(self, n):
        rng = np.random.default_rng(6)
        target = rng.standard_normal((5, 3))
        field = straight_line_field(target, layout=LAYOUT)
        out = integrate_flow(
            field, EMPTY_CACHE, NO_STATE, DenoiseConfig(num_steps=n),
            np.random.default_rng(7),
        )
        assert np.max(np.abs(out - target)) <= 1e-9

    def test_denoise_returns_standardized_chunk(self):
        target = np.zeros((4, 3))
        field = straight_line_field(target, layout=LAYOUT)
        chunk = denoise(field, EMPTY_CACHE, NO_STATE, DenoiseConfig(), np.random.default_rng(0))
        assert chunk.space == "standardized"
        assert chunk.horizon == 4

    def test_denoise_deterministic_given_seed(self):
        target = np.ones((4, 3))
        field = straight_line_field(target, layout=LAYOUT)
        a = denoise(field, EMPTY_CACHE, NO_STATE, DenoiseConfig(), np.random.default_rng(11))
        b = denoise(field, EMPTY_CACHE, NO_STATE, DenoiseConfig(), np.random.default_rng(11))
        assert np.array_equal(a.values, b.values)

    def test_default_num_steps_is_ten(self):
        assert DenoiseConfig().num_steps == 10

    def test_divergence_reports_step(self):
        def blowup(values, tau):
            return np.full_like(values, np.nan)

        from specflow.flowpolicy import AnalyticField

        field = AnalyticField(fn=blowup, horizon=2, dim=3, layout=LAYOUT)
        with pytest.raises(FloatingPointError, match="tau"):
            integrate_flow(
                field, EMPTY_CACHE, NO_STATE, DenoiseConfig(num_steps=4),
                np.random.default_rng(0),
            )


class TestFlowTraining:
    def test_flow_batch_construction(self):
        # scalar case: target 2, noise 0, tau 0.5 -> state 1, regression target 2
        targets = np.array([[[2.0]]])
        noise = np.array([[[0.0]]])
        taus = np.array([0.5])
        noisy, u = flow_batch(targets, taus, noise)
        assert noisy[0, 0, 0] == pytest.approx(1.0)
        assert u[0, 0, 0] == pytest.approx(2.0)

    def test_degenerate_dataset_denoises_to_constant(self):
        # one constant chunk: the trained field should reproduce it closely
        rng = np.random.default_rng(21)
        h, d = 2, 3
        target = np.array([[0.5, -0.25, 1.0], [0.0, 0.75, -1.0]])
        targets = np.tile(target, (64, 1, 1))
        field = VelocityField(
            net=init_mlp([h * d + 1, 96, 96, h * d], rng),
            horizon=h, dim=d, emb_dim=0, state_dim=0, layout=LAYOUT,
        )
        cfg = FlowTrainConfig(epochs=2500, learning_rate=2e-3, batch_size=32, weight_decay=1e-5)
        fit_flow_field(field, None, np.zeros((64, 0)), np.zeros((64, 0)), targets, cfg, rng)
        out = integrate_flow(
            field, EMPTY_CACHE, NO_STATE, DenoiseConfig(), np.random.default_rng(3)
        )
        assert np.max(np.abs(out - target)) < 0.05

    def test_loss_decreases(self):
        # targets are a smooth (linear) function of the context, like the real task
        rng = np.random.default_rng(33)
        h, d = 2, 3
        contexts = rng.standard_normal((128, 4))
        mix = rng.standard_normal((4, h * d)) * 0.4
        targets = (contexts @ mix).reshape(128, h, d)
        field = VelocityField(
            net=init_mlp([h * d + 1 + 4, 48, h * d], rng),
            horizon=h, dim=d, emb_dim=4, state_dim=0, layout=LAYOUT,
        )
        enc = ContextEncoder(
            net=init_mlp([4, 8, 4], rng), n_tasks=1, normalizer=ObsNormalizer.identity(4, 0)
        )
        cfg = FlowTrainConfig(epochs=200, learning_rate=2e-3, batch_size=32)
        losses = fit_flow_field(field, enc, contexts, np.zeros((128, 0)), targets, cfg, rng)
        assert losses[-1] < 0.5 * losses[0]

    def test_empty_dataset_rejected(self):
        field = VelocityField(
            net=init_mlp([7, 8, 6], np.random.default_rng(0)),
            horizon=2, dim=3, emb_dim=0, state_dim=0, layout=LAYOUT,
        )
        with pytest.raises(ValueError):
            fit_flow_field(
                field, None, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 2, 3)),
                FlowTrainConfig(epochs=1), np.random.default_rng(0),
            )
