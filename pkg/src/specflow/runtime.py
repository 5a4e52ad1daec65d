"""Dual-path replanning scheduler with verification and phase-aware fallback.

Each replanning round either runs the full inference path (context encode +
multi-step denoise) or the speculative path (single-pass draft + parallel
verification against the cached context). The speculative path falls back to
the full path when no prefix survives verification or when a gripper switch
is detected anywhere in the candidate chunk; a periodic refresh bounds how
long the cached context can go stale. The control loop is synchronous: the
world advances while inference blocks, which is exactly the failure mode the
speculative path exists to mitigate.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterable

import numpy as np

from .actions import ActionChunk, ChannelLayout, Standardizer, destandardize, gripper_switch
from .bench.metrics import (
    PATH_FLASH_ACCEPTED,
    PATH_FLASH_PHASE,
    PATH_FLASH_REJECTED,
    PATH_FULL,
    PATH_PERIODIC,
    EpisodeStats,
    episode_stats,
)
from .conveyor import ConveyorEnv
from .draft import DraftModel, propose
from .flowpolicy import ConditioningCache, ContextEncoder, DenoiseConfig, VelocityField, denoise, encode_context
from .latency import FLASH, FULL, CostProfile, LatencyCoupling, round_cost, stall_ticks
from .verifier import VerifierConfig, VerifierReport, verify

MODE_FULL_ONLY = "full_only"
MODE_FLASH = "flash"

_DENOISE_STREAM = 0
_VERIFY_STREAM = 1


@dataclass
class Models:
    """Trained model bundle shared by both inference paths."""

    encoder: ContextEncoder
    field: VelocityField
    standardizer: Standardizer
    draft: DraftModel | None = None

    @property
    def layout(self) -> ChannelLayout:
        assert self.field.layout is not None
        return self.field.layout

    def norm_state(self, robot_state: np.ndarray) -> np.ndarray:
        return self.encoder.normalizer.norm_state(robot_state)

    def gripper_sign(self, raw_gripper_state: float) -> float:
        """Current gripper state as a standardized sign (+/-1)."""
        gi = self.layout.gripper_index
        std_value = (raw_gripper_state - self.standardizer.mean[gi]) / self.standardizer.std[gi]
        return 1.0 if std_value > 0.0 else -1.0


@dataclass(frozen=True)
class RuntimePolicy:
    """Scheduler knobs: path selection, replan window, refresh, and fallback."""

    mode: str = MODE_FLASH
    replan_size: int = 12
    periodic_refresh: int = 2  # 0 disables the forced full-path refresh
    phase_fallback: bool = True
    verifier_cfg: VerifierConfig = dc_field(default_factory=VerifierConfig)
    denoise_cfg: DenoiseConfig = dc_field(default_factory=DenoiseConfig)
    prefix_cap: bool = True  # cap executed flash prefixes at the replan size
    fallback_accounting: str = "additive"  # or "full_only"

    def __post_init__(self) -> None:
        if self.mode not in (MODE_FULL_ONLY, MODE_FLASH):
            raise ValueError(f"unknown runtime mode {self.mode!r}")
        if self.replan_size < 1:
            raise ValueError("replan_size must be >= 1")
        if self.periodic_refresh < 0:
            raise ValueError("periodic_refresh must be >= 0")
        if self.fallback_accounting not in ("additive", "full_only"):
            raise ValueError(f"unknown fallback accounting {self.fallback_accounting!r}")


@dataclass
class RoundRecord:
    """One replanning round as it lands in the trace."""

    index: int
    path: str
    executed: int
    latency_ms: float
    start_tick: int
    stall_ticks: int
    planned: int
    prefix: int | None = None  # verifier L, flash rounds only
    branch_prefixes: tuple[int, ...] | None = None
    gripper_switch: bool | None = None
    switch_in_executed: bool | None = None
    cache_round: int | None = None
    denoise_seed: int | None = None
    verify_seed: int | None = None
    terminal: str | None = None  # "success"/"failure" on the round that ended it

    def to_record(self, **extra) -> dict:
        rec = {
            "round": self.index,
            "path": self.path,
            "executed": self.executed,
            "latency_ms": self.latency_ms,
            "start_tick": self.start_tick,
            "stall_ticks": self.stall_ticks,
            "planned": self.planned,
            "prefix": self.prefix,
            "branch_prefixes": list(self.branch_prefixes) if self.branch_prefixes is not None else None,
            "gripper_switch": self.gripper_switch,
            "switch_in_executed": self.switch_in_executed,
            "cache_round": self.cache_round,
            "denoise_seed": self.denoise_seed,
            "verify_seed": self.verify_seed,
            "terminal": self.terminal,
        }
        rec.update(extra)
        return rec


@dataclass
class RunnerState:
    """Between-round scheduler state."""

    cache: ConditioningCache | None = None
    flash_since_refresh: int = 0
    gripper_sign: float = -1.0


def detect_gripper_switch(
    chunks: Iterable[np.ndarray],
    layout: ChannelLayout,
    current_sign: float,
    window: int | None = None,
) -> bool:
    """True iff a standardized gripper sign flip appears in any scanned chunk."""
    return any(gripper_switch(c, layout, current_sign, window) for c in chunks)


def _stream_seed(episode_seed: int, round_index: int, stream: int) -> int:
    ss = np.random.SeedSequence([int(episode_seed), int(round_index), int(stream)])
    return int(ss.generate_state(1)[0])


def full_round(
    obs,
    models: Models,
    policy: RuntimePolicy,
    round_index: int,
    tick: int,
    episode_seed: int,
) -> tuple[ActionChunk, ConditioningCache, int]:
    """Full inference path: fresh context encode, then multi-step denoise."""
    cache = encode_context(models.encoder, obs, round_index=round_index, tick=tick)
    seed = _stream_seed(episode_seed, round_index, _DENOISE_STREAM)
    rng = np.random.default_rng(seed)
    chunk = denoise(models.field, cache, models.norm_state(obs.robot_state), policy.denoise_cfg, rng)
    return chunk, cache, seed


def flash_attempt(
    obs,
    models: Models,
    policy: RuntimePolicy,
    state: RunnerState,
    round_index: int,
    episode_seed: int,
) -> tuple[ActionChunk, VerifierReport, int]:
    """Speculative attempt: draft from the fresh observation, verify on the stale cache."""
    if state.cache is None:
        raise RuntimeError("flash round requires a cached context from a prior full round")
    if models.draft is None:
        raise RuntimeError("flash mode requires a draft model")
    draft_chunk = propose(models.draft, obs)
    seed = _stream_seed(episode_seed, round_index, _VERIFY_STREAM)
    report = verify(
        models.field,
        draft_chunk,
        state.cache,
        models.norm_state(obs.robot_state),
        policy.verifier_cfg,
        np.random.default_rng(seed),
        current_gripper_sign=state.gripper_sign,
        noise_seed=seed,
    )
    return draft_chunk, report, seed


def _advance_stall(env: ConveyorEnv, ticks: int) -> None:
    """World keeps moving while inference blocks; the robot holds its pose."""
    for _ in range(ticks):
        if env.terminal:
            return
        env.step(env.hold_action())


def _execute_prefix(env: ConveyorEnv, raw_values: np.ndarray, planned: int) -> int:
    executed = 0
    for h in range(planned):
        if env.terminal:
            break
        env.step(raw_values[h])
        executed += 1
    return executed


def run_episode(
    env: ConveyorEnv,
    policy: RuntimePolicy,
    models: Models,
    profile: CostProfile,
    coupling: LatencyCoupling,
    episode_seed: int,
    baseline_full_ms: float | None = None,
) -> tuple[EpisodeStats, list[RoundRecord]]:
    """Run one episode under the latency-coupled replanning loop.

    Deterministic given (episode seed, policy, profile, coupling, models):
    per-round noise comes from dedicated streams derived from the episode
    seed and round index, so full-path and flash-path rounds never perturb
    each other's randomness.
    """
    if policy.mode == MODE_FLASH and not profile.supports_flash:
        raise ValueError(f"profile {profile.name!r} has no flash path")
    state = RunnerState()
    records: list[RoundRecord] = []
    baseline = baseline_full_ms if baseline_full_ms is not None else profile.full_total

    while not env.terminal:
        round_index = len(records)
        start_tick = env.tick
        obs = env.observe()
        state.gripper_sign = models.gripper_sign(obs.robot_state[2])

        forced_refresh = (
            policy.periodic_refresh > 0
            and state.flash_since_refresh >= policy.periodic_refresh
        )
        use_flash = (
            policy.mode == MODE_FLASH and state.cache is not None and not forced_refresh
        )

        rec = RoundRecord(
            index=round_index,
            path=PATH_FULL,
            executed=0,
            latency_ms=0.0,
            start_tick=start_tick,
            stall_ticks=0,
            planned=0,
        )

        if not use_flash:
            rec.path = PATH_PERIODIC if (forced_refresh and policy.mode == MODE_FLASH) else PATH_FULL
            chunk, cache, rec.denoise_seed = full_round(
                obs, models, policy, round_index, start_tick, episode_seed
            )
            state.cache = cache
            state.flash_since_refresh = 0
            rec.latency_ms = round_cost(profile, FULL)
            ticks = stall_ticks(rec.latency_ms, coupling)
            rec.stall_ticks = ticks
            _advance_stall(env, ticks)
            rec.planned = policy.replan_size
        else:
            draft_chunk, report, rec.verify_seed = flash_attempt(
                obs, models, policy, state, round_index, episode_seed
            )
            rec.prefix = report.prefix
            rec.branch_prefixes = report.branch_prefixes
            rec.gripper_switch = report.gripper_switch_detected
            rec.cache_round = state.cache.captured_round

            phase_fb = policy.phase_fallback and report.gripper_switch_detected
            rejected = report.prefix == 0
            if phase_fb or rejected:
                # the flash attempt's time was genuinely spent: the world sees
                # its stall, then the full path replans from a re-observation
                rec.path = PATH_FLASH_PHASE if phase_fb else PATH_FLASH_REJECTED
                flash_ms = round_cost(profile, FLASH)
                flash_stall = stall_ticks(flash_ms, coupling)
                _advance_stall(env, flash_stall)
                obs2 = env.observe()
                chunk, cache, rec.denoise_seed = full_round(
                    obs2, models, policy, round_index, env.tick, episode_seed
                )
                state.cache = cache
                state.flash_since_refresh = 0
                full_ms = round_cost(profile, FULL)
                full_stall = stall_ticks(full_ms, coupling)
                _advance_stall(env, full_stall)
                rec.stall_ticks = flash_stall + full_stall
                rec.latency_ms = (
                    flash_ms + full_ms
                    if policy.fallback_accounting == "additive"
                    else full_ms
                )
                rec.planned = policy.replan_size
            else:
                rec.path = PATH_FLASH_ACCEPTED
                chunk = draft_chunk
                state.flash_since_refresh += 1
                rec.latency_ms = round_cost(profile, FLASH)
                ticks = stall_ticks(rec.latency_ms, coupling)
                rec.stall_ticks = ticks
                _advance_stall(env, ticks)
                cap = policy.replan_size if policy.prefix_cap else chunk.horizon
                rec.planned = min(report.prefix, cap)
                rec.switch_in_executed = gripper_switch(
                    chunk.values[: rec.planned], chunk.layout, state.gripper_sign
                )

        raw = destandardize(chunk, models.standardizer)
        rec.executed = _execute_prefix(env, raw.values, rec.planned)
        if env.terminal:
            rec.terminal = "success" if env.success else "failure"
        records.append(rec)

    stats = episode_stats(
        [r.to_record() for r in records], env.success, policy.replan_size, baseline
    )
    return stats, records
