"""Error-decomposition diagnostics for the verification rule.

Separates the gap between an accepted draft and the full-path endpoint into
measurable pieces: the field's own single-step reconstruction error under a
fresh context, the extra error introduced by reusing a stale context, and
the resulting endpoint discrepancy of accepted drafts. The accepted-draft
discrepancy is then compared against the acceptance threshold plus the
measured error terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..actions import continuous_distances
from ..conveyor import ConveyorEnv, EnvConfig, expert_action
from ..draft import propose
from ..flowpolicy import DenoiseConfig, denoise, encode_context
from ..runtime import Models
from ..verifier import VerifierConfig, reconstruct_endpoint, verify


def _summary(values: list[float]) -> dict:
    if not values:
        return {"n": 0, "mean": None, "p50": None, "p90": None, "max": None}
    arr = np.asarray(values)
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p90": float(np.percentile(arr, 90)),
        "max": float(arr.max()),
    }


@dataclass(frozen=True)
class DecompositionConfig:
    n_samples: int = 50
    burnin_max_ticks: int = 30
    staleness_ticks: int = 18  # context age when the stale gap is measured
    seed: int = 0


def _recon_gap(
    field, endpoint: np.ndarray, cache, state, cfg: VerifierConfig, rng
) -> float:
    """Mean per-step distance between one-step reconstructions and the endpoint."""
    eps = rng.standard_normal(endpoint.shape)
    gaps = []
    for tau in cfg.timesteps:
        recon = reconstruct_endpoint(field, endpoint, eps, tau, cache, state)
        gaps.append(
            float(np.mean(continuous_distances(endpoint, recon, field.layout)))
        )
    return float(np.mean(gaps))


def measure_error_decomposition(
    models: Models,
    env_cfg: EnvConfig,
    verifier_cfg: VerifierConfig,
    denoise_cfg: DenoiseConfig,
    cfg: DecompositionConfig,
) -> dict:
    """Sample in-distribution states and measure the verifier's error terms.

    Per sample: an expert-driven episode is advanced to a random tick; the
    context captured ``staleness_ticks`` earlier plays the stale cache, the
    current observation the fresh one. Reported proxies:

    - ``ae``: reconstruction-vs-full-denoise gap with the fresh cache.
    - ``cond``: the same gap with the stale cache, minus ``ae``.
    - ``accepted_discrepancy``: per-step distance between accepted draft
      prefixes (verified on the stale cache) and the fresh full-path endpoint.
    """
    ae_vals: list[float] = []
    cond_vals: list[float] = []
    disc_vals: list[float] = []
    n_accepted = 0
    n_rejected = 0
    for i in range(cfg.n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        env = ConveyorEnv.reset(env_cfg, rng)
        burnin = int(rng.integers(0, cfg.burnin_max_ticks + 1))
        for _ in range(burnin):
            if env.terminal:
                break
            env.step(expert_action(env))
        if env.terminal:
            continue
        stale_obs = env.observe()
        stale_cache = encode_context(models.encoder, stale_obs, round_index=0, tick=env.tick)
        for _ in range(cfg.staleness_ticks):
            if env.terminal:
                break
            env.step(expert_action(env))
        if env.terminal:
            continue
        obs = env.observe()
        state = models.norm_state(obs.robot_state)
        fresh_cache = encode_context(models.encoder, obs, round_index=1, tick=env.tick)
        endpoint = denoise(
            models.field, fresh_cache, state, denoise_cfg, np.random.default_rng(
                np.random.SeedSequence([cfg.seed, i, 1])
            )
        ).values

        gap_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i, 2]))
        ae = _recon_gap(models.field, endpoint, fresh_cache, state, verifier_cfg, gap_rng)
        gap_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i, 2]))
        stale_gap = _recon_gap(
            models.field, endpoint, stale_cache, state, verifier_cfg, gap_rng
        )
        ae_vals.append(ae)
        cond_vals.append(stale_gap - ae)

        if models.draft is not None:
            draft_chunk = propose(models.draft, obs)
            report = verify(
                models.field,
                draft_chunk,
                stale_cache,
                state,
                verifier_cfg,
                np.random.default_rng(np.random.SeedSequence([cfg.seed, i, 3])),
                current_gripper_sign=models.gripper_sign(obs.robot_state[2]),
            )
            if report.prefix > 0:
                n_accepted += 1
                d = continuous_distances(
                    draft_chunk.values[: report.prefix],
                    endpoint[: report.prefix],
                    models.layout,
                )
                disc_vals.append(float(np.mean(d)))
            else:
                n_rejected += 1

    ae_summary = _summary(ae_vals)
    cond_summary = _summary(cond_vals)
    bound = None
    frac_exceeding = None
    if disc_vals and ae_summary["mean"] is not None:
        bound = verifier_cfg.delta + ae_summary["mean"] + max(cond_summary["mean"], 0.0)
        frac_exceeding = float(np.mean(np.asarray(disc_vals) > bound))
    return {
        "samples": len(ae_vals),
        "ae": ae_summary,
        "cond": cond_summary,
        "accepted": n_accepted,
        "rejected": n_rejected,
        "accepted_discrepancy": _summary(disc_vals),
        "bound": bound,
        "frac_exceeding_bound": frac_exceeding,
    }
