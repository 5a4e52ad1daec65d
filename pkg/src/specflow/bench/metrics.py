"""Episode and suite accounting over round-trace records.

All metrics are pure folds over the per-round trace dictionaries, so every
reported aggregate can be recomputed from raw trace files. Flash rate is the
fraction of accepted flash rounds among all replanning rounds; Acc is the
mean executed prefix on those rounds normalized by the replan size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

PATH_FULL = "full"
PATH_PERIODIC = "periodic_refresh"
PATH_FLASH_ACCEPTED = "flash_accepted"
PATH_FLASH_REJECTED = "flash_rejected_fallback"
PATH_FLASH_PHASE = "flash_phase_fallback"

ALL_PATHS = (
    PATH_FULL,
    PATH_PERIODIC,
    PATH_FLASH_ACCEPTED,
    PATH_FLASH_REJECTED,
    PATH_FLASH_PHASE,
)


@dataclass(frozen=True)
class EpisodeStats:
    """Per-episode accounting; every field is recomputable from the trace."""

    success: bool
    rounds: int
    flash_rounds: int
    flash_rate: float
    acc: float
    lat_ms: float
    per_action_ms: float
    total_latency_ms: float
    executed_actions: int
    speedup: float


def episode_stats(
    records: Sequence[Mapping],
    success: bool,
    replan_size: int,
    baseline_full_ms: float,
) -> EpisodeStats:
    """Fold round records into episode metrics."""
    if not records:
        raise ValueError("episode trace is empty")
    rounds = len(records)
    flash_accepted = [r for r in records if r["path"] == PATH_FLASH_ACCEPTED]
    total_latency = float(sum(r["latency_ms"] for r in records))
    executed = int(sum(r["executed"] for r in records))
    lat = total_latency / rounds
    acc = (
        sum(r["executed"] for r in flash_accepted) / (replan_size * len(flash_accepted))
        if flash_accepted
        else 0.0
    )
    return EpisodeStats(
        success=success,
        rounds=rounds,
        flash_rounds=len(flash_accepted),
        flash_rate=len(flash_accepted) / rounds,
        acc=acc,
        lat_ms=lat,
        per_action_ms=total_latency / executed if executed else float("nan"),
        total_latency_ms=total_latency,
        executed_actions=executed,
        speedup=baseline_full_ms / lat if lat > 0 else float("nan"),
    )


@dataclass(frozen=True)
class PooledRounds:
    """Round-level tallies pooled across episodes of one benchmark condition."""

    rounds: int
    flash_accepted: int
    latency_total_ms: float
    executed_total: int
    accepted_executed_total: int

    @property
    def flash_rate(self) -> float:
        return self.flash_accepted / self.rounds if self.rounds else 0.0

    def acc(self, replan_size: int) -> float:
        if not self.flash_accepted:
            return 0.0
        return self.accepted_executed_total / (replan_size * self.flash_accepted)

    @property
    def lat_ms(self) -> float:
        return self.latency_total_ms / self.rounds if self.rounds else float("nan")

    @property
    def per_action_ms(self) -> float:
        return self.latency_total_ms / self.executed_total if self.executed_total else float("nan")


def pool_round_records(records: Sequence[Mapping]) -> PooledRounds:
    rounds = 0
    flash_accepted = 0
    latency = 0.0
    executed = 0
    accepted_executed = 0
    for r in records:
        if r["path"] not in ALL_PATHS:
            raise ValueError(f"unknown round path {r['path']!r}")
        rounds += 1
        latency += float(r["latency_ms"])
        executed += int(r["executed"])
        if r["path"] == PATH_FLASH_ACCEPTED:
            flash_accepted += 1
            accepted_executed += int(r["executed"])
    return PooledRounds(
        rounds=rounds,
        flash_accepted=flash_accepted,
        latency_total_ms=latency,
        executed_total=executed,
        accepted_executed_total=accepted_executed,
    )
