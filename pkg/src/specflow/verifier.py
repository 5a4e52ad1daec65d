"""Multi-step parallel verification of a drafted action chunk.

One shared Gaussian noise is interpolated with the draft at a handful of
interior flow timesteps; the main model's velocity field reconstructs the
endpoint from each intermediate state in a single step, and per-step
continuous distances against the draft determine the longest executable
prefix. The conservative result is the minimum prefix over all branches.

The branches are independent given the shared noise and a pure field, so any
evaluation schedule yields an identical report; this module keeps them
sequential, which is the reference schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import (
    STANDARDIZED,
    ActionChunk,
    continuous_distances,
    gripper_switch,
)
from .flowpolicy import ConditioningCache, velocity


@dataclass(frozen=True)
class VerifierConfig:
    """Verification timesteps, distance threshold, and channel metric."""

    timesteps: tuple[float, ...] = (1.0 / 3.0, 2.0 / 3.0)
    delta: float = 0.15
    metric: str = "l2"
    gripper_window: int | None = None  # None scans the full chunk

    def __post_init__(self) -> None:
        ts = tuple(float(t) for t in self.timesteps)
        if not ts:
            raise ValueError("need at least one verification timestep")
        if any(not 0.0 < t < 1.0 for t in ts):
            raise ValueError("verification timesteps must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("verification timesteps must be strictly increasing")
        if self.delta < 0.0:
            raise ValueError("delta must be non-negative")
        if self.metric not in ("l2", "linf"):
            raise ValueError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "timesteps", ts)


@dataclass(frozen=True)
class VerifierReport:
    """Everything a verification round produced, for tracing and fallback logic."""

    reconstructed: np.ndarray  # (K, H, D) endpoint estimates
    distances: np.ndarray  # (K, H) per-branch per-step distances
    branch_prefixes: tuple[int, ...]
    prefix: int  # min over branches
    gripper_switch_detected: bool
    shared_noise_seed: int | None = None


def interpolate(draft_values: np.ndarray, eps: np.ndarray, tau: float) -> np.ndarray:
    """Intermediate denoising state tau * draft + (1 - tau) * eps."""
    draft_values = np.asarray(draft_values, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if draft_values.shape != eps.shape:
        raise ValueError("draft and noise shapes differ")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    return tau * draft_values + (1.0 - tau) * eps


def reconstruct_endpoint(
    field,
    draft_values: np.ndarray,
    eps: np.ndarray,
    tau: float,
    cache: ConditioningCache,
    state: np.ndarray,
) -> np.ndarray:
    """Single-step endpoint estimate from the interpolated state at tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau={tau} outside (0, 1)")
    noisy = interpolate(draft_values, eps, tau)
    recon = noisy + (1.0 - tau) * velocity(field, noisy, tau, cache, state)
    if not np.all(np.isfinite(recon)):
        raise FloatingPointError(f"endpoint reconstruction at tau={tau} is non-finite")
    return recon


def prefix_length(distances: np.ndarray, delta: float) -> int:
    """Longest leading run of distances <= delta.

    Equals sum_h prod_{j<=h} 1[d_j <= delta]: a later pass never revives a
    prefix broken earlier.
    """
    n = 0
    for d in np.asarray(distances, dtype=np.float64):
        if d <= delta:
            n += 1
        else:
            break
    return n


def verify(
    field,
    draft: ActionChunk,
    cache: ConditioningCache,
    state: np.ndarray,
    cfg: VerifierConfig,
    rng: np.random.Generator,
    current_gripper_sign: float = -1.0,
    noise_seed: int | None = None,
) -> VerifierReport:
    """Run all verification branches against one shared noise draw.

    The gripper scan covers the draft and every reconstructed branch; a sign
    flip anywhere inside the scan window marks the round as phase-critical
    regardless of the distance result.
    """
    if draft.space != STANDARDIZED:
        raise ValueError("verification operates on standardized drafts")
    k = len(cfg.timesteps)
    h = draft.horizon
    eps = rng.standard_normal(draft.values.shape)  # shared across all branches
    reconstructed = np.empty((k, h, draft.layout.dim))
    distances = np.empty((k, h))
    for i, tau in enumerate(cfg.timesteps):
        recon = reconstruct_endpoint(field, draft.values, eps, tau, cache, state)
        reconstructed[i] = recon
        distances[i] = continuous_distances(draft.values, recon, draft.layout, cfg.metric)
    branch_prefixes = tuple(prefix_length(distances[i], cfg.delta) for i in range(k))
    switch = gripper_switch(
        draft.values, draft.layout, current_gripper_sign, cfg.gripper_window
    ) or any(
        gripper_switch(reconstructed[i], draft.layout, current_gripper_sign, cfg.gripper_window)
        for i in range(k)
    )
    return VerifierReport(
        reconstructed=reconstructed,
        distances=distances,
        branch_prefixes=branch_prefixes,
        prefix=min(branch_prefixes),
        gripper_switch_detected=switch,
        shared_noise_seed=noise_seed,
    )
