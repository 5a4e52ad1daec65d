"""Analytic self-checks runnable without any trained model or dataset.

These exercise the closed-form identities the verifier and denoiser must
satisfy: oracle-field exactness, Euler identities, the prefix formula, and
interpolation endpoints. The CLI exposes them as ``verify-selftest``.
"""

from __future__ import annotations

import numpy as np

from ..actions import ChannelLayout, ActionChunk, STANDARDIZED
from ..flowpolicy import (
    ConditioningCache,
    DenoiseConfig,
    constant_field,
    integrate_flow,
    straight_line_field,
)
from ..verifier import VerifierConfig, interpolate, prefix_length, reconstruct_endpoint, verify

_LAYOUT = ChannelLayout(pos_dims=2, rot_dims=0)
_EMPTY_CACHE = ConditioningCache(embedding=np.zeros(0))
_NO_STATE = np.zeros(0)


def _brute_force_prefix(distances: np.ndarray, delta: float) -> int:
    n = 0
    for d in distances:
        if d > delta:
            break
        n += 1
    return n


def _check_prefix_formula() -> tuple[bool, str]:
    h = 8
    for pattern in range(2**h):
        passes = np.array([(pattern >> j) & 1 for j in range(h)], dtype=float)
        d = np.where(passes > 0, 0.0, 1.0)
        got = prefix_length(d, 0.5)
        closed_form = int(sum(np.prod(d[: j + 1] <= 0.5) for j in range(h)))
        if got != _brute_force_prefix(d, 0.5) or got != closed_form:
            return False, f"pattern {pattern:08b}: prefix {got} != brute force"
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        d = rng.uniform(0.0, 0.3, size=rng.integers(1, 20))
        if prefix_length(d, 0.15) != _brute_force_prefix(d, 0.15):
            return False, "random vector mismatch"
    return True, "2^8 patterns and 10^4 random vectors match brute force"


def _check_oracle_verify() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    h = 50
    worst = 0.0
    for case in range(100):
        k = int(rng.choice([1, 2, 4]))
        taus = tuple(np.sort(rng.uniform(0.05, 0.95, size=k)))
        draft_values = rng.standard_normal((h, _LAYOUT.dim))
        draft = ActionChunk(values=draft_values, layout=_LAYOUT, space=STANDARDIZED)
        field = straight_line_field(draft_values, layout=_LAYOUT)
        # reconstruction is exact up to float rounding; 1e-12 absorbs it
        cfg = VerifierConfig(timesteps=taus, delta=1e-12)
        report = verify(
            field, draft, _EMPTY_CACHE, _NO_STATE, cfg,
            np.random.default_rng(np.random.SeedSequence([7, case])),
        )
        worst = max(worst, float(report.distances.max()))
        if report.prefix != h:
            return False, f"case {case}: oracle field gave prefix {report.prefix} != {h}"
    if worst > 1e-9:
        return False, f"oracle reconstruction distance {worst:.2e} > 1e-9"
    return True, f"100 cases, K in {{1,2,4}}: prefix = H, max distance {worst:.2e}"


def _check_euler_identities() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    target = rng.standard_normal((6, _LAYOUT.dim))
    for n in (1, 10):
        field = straight_line_field(target, layout=_LAYOUT)
        out = integrate_flow(
            field, _EMPTY_CACHE, _NO_STATE, DenoiseConfig(num_steps=n),
            np.random.default_rng(11),
        )
        if np.max(np.abs(out - target)) > 1e-9:
            return False, f"straight-line flow missed the target at N={n}"
    c = rng.standard_normal((6, _LAYOUT.dim))
    for n in (1, 3, 10):
        field = constant_field(c, layout=_LAYOUT)
        rng_noise = np.random.default_rng(13)
        start = rng_noise.standard_normal((6, _LAYOUT.dim))
        out = integrate_flow(
            field, _EMPTY_CACHE, _NO_STATE, DenoiseConfig(num_steps=n),
            np.random.default_rng(13),
        )
        tol = 0.0 if n == 1 else 1e-12  # N steps of c/N accumulate float rounding only
        if np.max(np.abs(out - (start + c))) > tol:
            return False, f"constant-field integration not exact at N={n}"
    return True, "constant and straight-line fields integrate exactly"


def _check_reconstruction_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    draft = rng.standard_normal((10, _LAYOUT.dim))
    eps = rng.standard_normal((10, _LAYOUT.dim))
    field = straight_line_field(draft, layout=_LAYOUT)
    for tau in (0.1, 1.0 / 3.0, 0.5, 0.9):
        recon = reconstruct_endpoint(field, draft, eps, tau, _EMPTY_CACHE, _NO_STATE)
        if np.max(np.abs(recon - draft)) > 1e-12:
            return False, f"reconstruction at tau={tau} is not the draft"
    if np.max(np.abs(interpolate(draft, eps, 0.0) - eps)) > 0:
        return False, "interpolation at tau=0 is not the noise"
    if np.max(np.abs(interpolate(draft, eps, 1.0) - draft)) > 0:
        return False, "interpolation at tau=1 is not the draft"
    return True, "endpoint reconstruction and interpolation identities hold"


def run_selftest() -> list[tuple[str, bool, str]]:
    checks = [
        ("prefix-formula", _check_prefix_formula),
        ("oracle-verify", _check_oracle_verify),
        ("euler-identities", _check_euler_identities),
        ("reconstruction-identity", _check_reconstruction_identity),
    ]
    return [(name, *fn()) for name, fn in checks]
