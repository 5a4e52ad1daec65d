"""Lightweight draft model and its prefix-weighted regression training.

The draft proposes the whole candidate chunk in a single forward pass from
the fresh observation, so a speculative round never touches the expensive
context-building stage. Training regresses teacher chunks produced by the
trained main policy (default) or raw demonstration chunks, with early steps
weighted up to a sampled prefix length and the tail down-weighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import STANDARDIZED, ActionChunk, ChannelLayout
from . import nets
from .flowpolicy import (
    ConditioningCache,
    ContextEncoder,
    DenoiseConfig,
    Observation,
    VelocityField,
    integrate_flow,
)
from .nets import Mlp


@dataclass
class DraftModel:
    """Single-pass chunk proposer: [world, task one-hot, robot state] -> H x D."""

    net: Mlp
    layout: ChannelLayout
    horizon: int
    n_tasks: int
    normalizer: object  # ObsNormalizer; shared with the main policy

    def __post_init__(self) -> None:
        if self.net.out_dim != self.horizon * self.layout.dim:
            raise ValueError("draft net output does not match horizon x dim")

    def features(self, obs: Observation) -> np.ndarray:
        if not (0 <= obs.task_id < self.n_tasks):
            raise ValueError(f"unknown task id {obs.task_id}")
        onehot = np.zeros(self.n_tasks)
        onehot[obs.task_id] = 1.0
        return np.concatenate(
            [
                self.normalizer.norm_world(obs.world_features),
                onehot,
                self.normalizer.norm_state(obs.robot_state),
            ]
        )


def propose(model: DraftModel, obs: Observation) -> ActionChunk:
    """Propose a full candidate chunk in one deterministic forward pass."""
    out, _ = nets.forward(model.net, model.features(obs))
    values = out.reshape(model.horizon, model.layout.dim)
    return ActionChunk(values=values, layout=model.layout, space=STANDARDIZED)


def smooth_l1(x, y, beta: float = 1.0):
    """Huber-style loss: quadratic within beta of the target, linear outside."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    d = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    out = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x, y, beta: float = 1.0):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


def prefix_weights(p: int, horizon: int, gamma_prefix: float, tail_weight: float) -> np.ndarray:
    """Step weights: geometric ramp gamma^(h-1) up to step p, flat tail after."""
    if not 1 <= p <= horizon:
        raise ValueError(f"prefix length {p} outside [1, {horizon}]")
    if not 0.0 < gamma_prefix <= 1.0:
        raise ValueError("gamma_prefix must lie in (0, 1]")
    if not 0.0 <= tail_weight <= 1.0:
        raise ValueError("tail_weight must lie in [0, 1]")
    w = np.full(horizon, tail_weight)
    w[:p] = gamma_prefix ** np.arange(p)
    return w


@dataclass(frozen=True)
class DraftTrainConfig:
    huber_beta: float = 1.0
    gamma_prefix: float = 0.9
    tail_weight: float = 0.1
    max_prefix: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    target_source: str = "teacher"  # or "demo"
    val_fraction: float = 0.1
    select_steps: int = 12  # validation RMS window used for checkpoint selection
    grad_clip: float = 1.0

    def __post_init__(self) -> None:
        if self.max_prefix < 1:
            raise ValueError("max_prefix must be >= 1")
        if self.target_source not in ("teacher", "demo"):
            raise ValueError(f"unknown target_source {self.target_source!r}")


def teacher_targets(
    field: VelocityField,
    encoder: ContextEncoder,
    enc_inputs: np.ndarray,
    states: np.ndarray,
    denoise_cfg: DenoiseConfig,
    seed: int,
) -> np.ndarray:
    """Teacher chunks: the trained main policy denoised once per sample.

    Each sample gets its own deterministic noise stream, so regenerating the
    targets with the same seed is bit-identical and never reads demonstration
    actions.
    """
    n = enc_inputs.shape[0]
    out = np.empty((n, field.horizon, field.dim))
    for i in range(n):
        emb, _ = encoder.embed(enc_inputs[i])
        cache = ConditioningCache(embedding=emb)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out[i] = integrate_flow(field, cache, states[i], denoise_cfg, rng)
    return out


def train_draft(
    model: DraftModel,
    features: np.ndarray,
    targets: np.ndarray,
    cfg: DraftTrainConfig,
    rng: np.random.Generator,
) -> tuple[DraftModel, list[float]]:
    """Prefix-weighted Huber regression; keeps the best-validation parameters.

    ``features`` are pre-featurized draft inputs, ``targets`` standardized
    chunks of shape (N, H, D). The prefix length P is resampled uniformly in
    [1, max_prefix] per batch. Returns the model (parameters set to the best
    epoch by validation RMS over the first ``select_steps`` rows) and the
    per-epoch validation RMS curve.
    """
    n = targets.shape[0]
    if n == 0:
        raise ValueError("draft training dataset is empty")
    h, d = model.horizon, model.layout.dim
    if targets.shape[1:] != (h, d):
        raise ValueError("targets do not match the draft model shape")
    max_prefix = min(cfg.max_prefix, h)
    n_val = max(1, int(round(n * cfg.val_fraction))) if n > 1 else 0
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order
    params = nets.parameters(model.net)
    opt = nets.init_optim(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    def val_rms() -> float:
        idx = val_idx if val_idx.size else train_idx
        pred, _ = nets.forward(model.net, features[idx])
        pred = pred.reshape(idx.size, h, d)
        steps = min(cfg.select_steps, h)
        err = pred[:, :steps, :] - targets[idx, :steps, :]
        return float(np.sqrt(np.mean(err**2)))

    best_rms = np.inf
    best_params = [p.copy() for p in params]
    curve: list[float] = []
    for _ in range(cfg.epochs):
        epoch_order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, epoch_order.size, cfg.batch_size):
            idx = epoch_order[start : start + cfg.batch_size]
            p_len = int(rng.integers(1, max_prefix + 1))
            w = prefix_weights(p_len, h, cfg.gamma_prefix, cfg.tail_weight)
            pred, tape = nets.forward(model.net, features[idx])
            pred3 = pred.reshape(idx.size, h, d)
            per_elem = smooth_l1(pred3, targets[idx], cfg.huber_beta)
            loss = float(np.mean(np.sum(w[None, :] * per_elem.mean(axis=2), axis=1)))
            if not np.isfinite(loss):
                raise FloatingPointError("draft training loss became non-finite")
            gout = smooth_l1_grad(pred3, targets[idx], cfg.huber_beta)
            gout *= w[None, :, None] / (idx.size * d)
            grads, _ = nets.backward(model.net, tape, gout.reshape(idx.size, h * d))
            nets.adamw_step(
                params, nets.clip_global_norm(nets.grad_list(grads), cfg.grad_clip), opt
            )
        rms = val_rms()
        curve.append(rms)
        if rms < best_rms:
            best_rms = rms
            best_params = [p.copy() for p in params]
    for p, best in zip(params, best_params):
        p[...] = best
    return model, curve
