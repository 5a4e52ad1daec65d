"""Speculative inference for flow-matching action policies, desk scale.

A trainable flow-matching main policy, a lightweight single-pass draft
model, parallel flow-consistency verification, a dual-path replanning
runtime with phase-aware fallback, and a latency-coupled conveyor-intercept
benchmark that ties inference cost back to world time.
"""

__version__ = "0.1.0"
