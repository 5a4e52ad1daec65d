"""Benchmark harness: metrics, persistence, configuration, reports, CLI.

Heavy submodules (harness, cli, diagnostics) are imported explicitly by
callers; this package root only exposes the lightweight building blocks.
"""

from .metrics import EpisodeStats, episode_stats, pool_round_records  # noqa: F401
