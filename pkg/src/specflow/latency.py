"""Latency cost model and its coupling to world time.

Round latencies come from fixed per-stage cost profiles (measured on real
GPU pipelines and treated as data here), not from wall-clock timing of the
desk-scale models. During inference the world keeps moving: a round's
latency converts to a whole number of control ticks during which the robot
holds its last commanded pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

FULL = "full"
FLASH = "flash"


@dataclass(frozen=True)
class CostProfile:
    """Per-stage latencies (ms) for full rounds and, optionally, flash rounds.

    Full stages: (image encoder, context prefill, action denoise).
    Flash stages: (image encoder, draft model, parallel verifier).
    """

    name: str
    full_stages: tuple[float, float, float]
    flash_stages: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        stages = self.full_stages + (self.flash_stages or ())
        if any(s < 0.0 for s in stages):
            raise ValueError("stage latencies must be non-negative")

    @property
    def full_total(self) -> float:
        return float(sum(self.full_stages))

    @property
    def flash_total(self) -> float:
        if self.flash_stages is None:
            raise ValueError(f"profile {self.name!r} has no flash path")
        return float(sum(self.flash_stages))

    @property
    def supports_flash(self) -> bool:
        return self.flash_stages is not None


BUILTIN_PROFILES: dict[str, CostProfile] = {
    "torch": CostProfile("torch", (11.3, 26.7, 20.0)),
    "triton": CostProfile("triton", (4.7, 22.4, 12.6)),
    "flash": CostProfile("flash", (11.3, 26.7, 20.0), (11.0, 3.5, 3.4)),
    "flash_triton": CostProfile("flash_triton", (4.7, 22.4, 12.6), (4.7, 0.9, 2.2)),
}


def get_profile(name: str) -> CostProfile:
    try:
        return BUILTIN_PROFILES[name]
    except KeyError:
        raise KeyError(
            f"unknown cost profile {name!r}; built-ins: {sorted(BUILTIN_PROFILES)}"
        ) from None


def round_cost(profile: CostProfile, path: str) -> float:
    """Total latency of one inference round on the given path."""
    if path == FULL:
        return profile.full_total
    if path == FLASH:
        return profile.flash_total
    raise ValueError(f"unknown path {path!r}")


@dataclass(frozen=True)
class LatencyCoupling:
    """Control-tick length used to convert round latency into held world ticks."""

    tick_ms: float = 10.0

    def __post_init__(self) -> None:
        if self.tick_ms <= 0.0:
            raise ValueError("tick_ms must be positive")


def stall_ticks(latency_ms: float, coupling: LatencyCoupling) -> int:
    """Ticks the world advances while inference blocks the control loop."""
    if latency_ms < 0.0:
        raise ValueError("latency must be non-negative")
    # round before ceil to keep x.0 ratios from float noise
    return int(math.ceil(round(latency_ms / coupling.tick_ms, 9)))


def blended_latency(
    flash_rate: float,
    acc_prefix_mean: float,
    profile: CostProfile,
    replan_size: int = 12,
) -> tuple[float, float]:
    """Closed-form (Lat, /Act) estimate from flash rate and mean accepted prefix.

    Lat mixes flash and full round costs by the flash rate; /Act divides by
    the expected executed actions per round (accepted prefix on flash rounds,
    the full replan window otherwise). This ignores fallback accounting, so
    it is a consistency estimate rather than an identity.
    """
    if not 0.0 <= flash_rate <= 1.0:
        raise ValueError("flash_rate must lie in [0, 1]")
    if acc_prefix_mean < 0.0:
        raise ValueError("acc_prefix_mean must be non-negative")
    lat = flash_rate * profile.flash_total + (1.0 - flash_rate) * profile.full_total
    actions_per_round = replan_size * (flash_rate * acc_prefix_mean + (1.0 - flash_rate))
    per_act = lat / actions_per_round if actions_per_round > 0 else float("nan")
    return lat, per_act


def speedup(baseline_latency_ms: float, latency_ms: float) -> float:
    if latency_ms <= 0.0:
        raise ValueError("latency must be positive")
    return baseline_latency_ms / latency_ms
