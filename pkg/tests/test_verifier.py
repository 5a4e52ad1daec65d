"""Parallel verification: interpolation, reconstruction, prefixes, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specflow.actions import STANDARDIZED, ActionChunk, ChannelLayout
from specflow.flowpolicy import AnalyticField, ConditioningCache, straight_line_field
from specflow.verifier import (
    VerifierConfig,
    interpolate,
    prefix_length,
    reconstruct_endpoint,
    verify,
)

LAYOUT = ChannelLayout(pos_dims=2, rot_dims=0)
CACHE = ConditioningCache(embedding=np.zeros(0))
STATE = np.zeros(0)


def std_chunk(values):
    return ActionChunk(values=np.asarray(values, dtype=float), layout=LAYOUT, space=STANDARDIZED)


def offset_field(draft_values, row_offsets):
    """Oracle field, except selected rows reconstruct away from the draft."""
    goal = np.asarray(draft_values, dtype=float) + np.asarray(row_offsets, dtype=float)

    def fn(values, tau):
        return (goal - values) / (1.0 - tau)

    return AnalyticField(fn=fn, horizon=goal.shape[0], dim=goal.shape[1], layout=LAYOUT)


class TestInterpolate:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        draft = rng.normal(size=(4, 3))
        eps = rng.normal(size=(4, 3))
        assert np.array_equal(interpolate(draft, eps, 0.0), eps)
        assert np.array_equal(interpolate(draft, eps, 1.0), draft)

    def test_midpoint_scalar_case(self):
        draft = np.full((1, 1), 2.0)
        eps = np.zeros((1, 1))
        assert interpolate(draft, eps, 0.5)[0, 0] == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolate(np.zeros((2, 3)), np.zeros((3, 3)), 0.5)


class TestReconstruct:
    def test_oracle_field_recovers_draft(self):
        rng = np.random.default_rng(1)
        draft = rng.normal(size=(6, 3))
        eps = rng.normal(size=(6, 3))
        field = straight_line_field(draft, layout=LAYOUT)
        for tau in (0.2, 1.0 / 3.0, 2.0 / 3.0, 0.9):
            recon = reconstruct_endpoint(field, draft, eps, tau, CACHE, STATE)
            assert np.max(np.abs(recon - draft)) <= 1e-12

    def test_zero_field_returns_interpolant(self):
        rng = np.random.default_rng(2)
        draft = rng.normal(size=(3, 3))
        eps = rng.normal(size=(3, 3))
        field = AnalyticField(fn=lambda v, t: np.zeros_like(v), horizon=3, dim=3, layout=LAYOUT)
        recon = reconstruct_endpoint(field, draft, eps, 0.4, CACHE, STATE)
        assert np.allclose(recon, interpolate(draft, eps, 0.4))

    def test_tau_bounds(self):
        field = straight_line_field(np.zeros((2, 3)), layout=LAYOUT)
        with pytest.raises(ValueError):
            reconstruct_endpoint(field, np.zeros((2, 3)), np.zeros((2, 3)), 0.0, CACHE, STATE)
        with pytest.raises(ValueError):
            reconstruct_endpoint(field, np.zeros((2, 3)), np.zeros((2, 3)), 1.0, CACHE, STATE)


class TestPrefixLength:
    def test_all_pass(self):
        assert prefix_length(np.full(7, 0.01), 0.15) == 7

    def test_first_fails(self):
        assert prefix_length(np.array([0.2, 0.0, 0.0]), 0.15) == 0

    def test_hand_case_no_revival(self):
        d = np.array([0.1, 0.2, 0.05, 0.3])
        assert prefix_length(d, 0.15) == 1

    def test_exhaustive_binary_patterns(self):
        h = 8
        for pattern in range(2**h):
            d = np.array([0.0 if (pattern >> j) & 1 else 1.0 for j in range(h)])
            brute = 0
            for val in d:
                if val > 0.5:
                    break
                brute += 1
            closed_form = int(sum(np.prod(d[: j + 1] <= 0.5) for j in range(h)))
            assert prefix_length(d, 0.5) == brute == closed_form

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_random_vectors_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        d = rng.uniform(0.0, 0.3, size=int(rng.integers(1, 40)))
        delta = float(rng.uniform(0.0, 0.3))
        brute = 0
        for val in d:
            if val > delta:
                break
            brute += 1
        assert prefix_length(d, delta) == brute


class TestVerify:
    def test_oracle_field_accepts_everything(self):
        rng = np.random.default_rng(3)
        draft = std_chunk(rng.normal(size=(10, 3)))
        field = straight_line_field(draft.values, layout=LAYOUT)
        report = verify(field, draft, CACHE, STATE, VerifierConfig(), np.random.default_rng(0))
        assert report.prefix == 10
        assert float(report.distances.max()) <= 1e-9

    def test_conservative_minimum_over_branches(self):
        # branch at tau1 breaks after 7 rows, branch at tau2 after 3 rows
        rng = np.random.default_rng(4)
        h = 10
        draft = std_chunk(rng.normal(size=(h, 3)))
        big = 1.0

        def fn(values, tau):
            goal = draft.values.copy()
            cutoff = 7 if tau < 0.5 else 3
            goal[cutoff:, :2] += big
            return (goal - values) / (1.0 - tau)

        field = AnalyticField(fn=fn, horizon=h, dim=3, layout=LAYOUT)
        report = verify(
            field, draft, CACHE, STATE, VerifierConfig(delta=0.15),
            np.random.default_rng(1),
        )
        assert report.branch_prefixes == (7, 3)
        assert report.prefix == 3

    def test_zero_delta_rejects_imperfect_reconstruction(self):
        rng = np.random.default_rng(5)
        draft = std_chunk(rng.normal(size=(5, 3)))
        offsets = np.zeros((5, 3))
        offsets[:, 0] = 0.01  # small but nonzero positional error everywhere
        field = offset_field(draft.values, offsets)
        report = verify(
            field, draft, CACHE, STATE, VerifierConfig(delta=0.0), np.random.default_rng(2)
        )
        assert report.prefix == 0

    def test_gripper_only_disagreement_does_not_reject(self):
        rng = np.random.default_rng(6)
        values = rng.normal(size=(5, 3))
        values[:, 2] = -1.0  # keep gripper strictly negative
        draft = std_chunk(values)
        offsets = np.zeros((5, 3))
        offsets[:, 2] = -0.5  # reconstruction differs only on the gripper channel
        field = offset_field(draft.values, offsets)
        report = verify(
            field, draft, CACHE, STATE, VerifierConfig(delta=1e-9),
            np.random.default_rng(3), current_gripper_sign=-1.0,
        )
        assert report.prefix == 5
        assert not report.gripper_switch_detected

    def test_switch_detected_only_in_reconstructed_branch(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=(6, 3))
        values[:, 2] = -0.8  # draft keeps the gripper on the current side
        draft = std_chunk(values)
        offsets = np.zeros((6, 3))
        offsets[4, 2] = 1.6  # branch reconstruction flips the gripper at step 5
        field = offset_field(draft.values, offsets)
        report = verify(
            field, draft, CACHE, STATE, VerifierConfig(delta=0.15),
            np.random.default_rng(4), current_gripper_sign=-1.0,
        )
        assert report.gripper_switch_detected
        assert report.prefix == 6  # distances ignore the gripper channel

    def test_shared_noise_determinism(self):
        rng = np.random.default_rng(8)
        draft = std_chunk(rng.normal(size=(8, 3)))
        offsets = rng.normal(size=(8, 3)) * 0.1
        field = offset_field(draft.values, offsets)
        cfg = VerifierConfig(delta=0.1)
        a = verify(field, draft, CACHE, STATE, cfg, np.random.default_rng(42), noise_seed=42)
        b = verify(field, draft, CACHE, STATE, cfg, np.random.default_rng(42), noise_seed=42)
        assert np.array_equal(a.distances, b.distances)
        assert a.branch_prefixes == b.branch_prefixes
        assert a.shared_noise_seed == 42

    def test_branch_order_does_not_matter(self):
        # evaluating the same timestep set yields the same conservative prefix
        rng = np.random.default_rng(9)
        draft = std_chunk(rng.normal(size=(8, 3)))
        offsets = rng.normal(size=(8, 3)) * 0.2
        field = offset_field(draft.values, offsets)
        cfg = VerifierConfig(timesteps=(0.25, 0.5, 0.75), delta=0.1)
        report = verify(field, draft, CACHE, STATE, cfg, np.random.default_rng(5))
        assert report.prefix == min(report.branch_prefixes)

    def test_eval_count_is_k(self):
        rng = np.random.default_rng(10)
        draft = std_chunk(rng.normal(size=(5, 3)))
        field = straight_line_field(draft.values, layout=LAYOUT)
        for k, taus in ((1, (0.5,)), (2, (1 / 3, 2 / 3)), (4, (0.2, 0.4, 0.6, 0.8))):
            field.eval_count = 0
            verify(
                field, draft, CACHE, STATE, VerifierConfig(timesteps=taus),
                np.random.default_rng(0),
            )
            assert field.eval_count == k

    def test_raw_draft_rejected(self):
        chunk = ActionChunk(values=np.zeros((2, 3)), layout=LAYOUT, space="raw")
        field = straight_line_field(np.zeros((2, 3)), layout=LAYOUT)
        with pytest.raises(ValueError):
            verify(field, chunk, CACHE, STATE, VerifierConfig(), np.random.default_rng(0))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_monotone_in_delta(self, seed):
        rng = np.random.default_rng(seed)
        draft = std_chunk(rng.normal(size=(6, 3)))
        offsets = rng.normal(size=(6, 3)) * 0.15
        field = offset_field(draft.values, offsets)
        d1, d2 = sorted(rng.uniform(0.0, 0.4, size=2))
        l1 = verify(
            field, draft, CACHE, STATE, VerifierConfig(delta=float(d1)),
            np.random.default_rng(seed),
        ).prefix
        l2 = verify(
            field, draft, CACHE, STATE, VerifierConfig(delta=float(d2)),
            np.random.default_rng(seed),
        ).prefix
        assert l1 <= l2

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_monotone_in_timestep_count(self, seed):
        rng = np.random.default_rng(seed)
        draft = std_chunk(rng.normal(size=(6, 3)))
        offsets = rng.normal(size=(6, 3)) * 0.15
        field = offset_field(draft.values, offsets)
        small = VerifierConfig(timesteps=(1 / 3, 2 / 3), delta=0.15)
        large = VerifierConfig(timesteps=(0.2, 1 / 3, 2 / 3, 0.9), delta=0.15)
        l_small = verify(field, draft, CACHE, STATE, small, np.random.default_rng(seed)).prefix
        l_large = verify(field, draft, CACHE, STATE, large, np.random.default_rng(seed)).prefix
        assert l_large <= l_small


class TestConfigValidation:
    def test_timesteps_must_be_interior(self):
        with pytest.raises(ValueError):
            VerifierConfig(timesteps=(0.0, 0.5))
        with pytest.raises(ValueError):
            VerifierConfig(timesteps=(0.5, 1.0))

    def test_timesteps_strictly_increasing(self):
        with pytest.raises(ValueError):
            VerifierConfig(timesteps=(0.5, 0.5))

    def test_negative_delta(self):
        with pytest.raises(ValueError):
            VerifierConfig(delta=-0.1)

    def test_defaults_match_runtime_settings(self):
        cfg = VerifierConfig()
        assert cfg.timesteps == (1 / 3, 2 / 3)
        assert cfg.delta == 0.15
