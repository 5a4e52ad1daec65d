"""Minimal feed-forward networks with exact backprop and an AdamW optimizer.

The model zoo here is tiny and fixed (context encoder, velocity field, draft
net), so reverse-mode gradients are written out by hand instead of pulling in
an autodiff framework; exactness is checked against central finite
differences in the test suite. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output."""

    weights: list[np.ndarray]  # per layer, shape (n_out, n_in)
    biases: list[np.ndarray]  # per layer, shape (n_out,)

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and matching")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i} has inconsistent shapes")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input does not match layer {i - 1} output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]


def init_mlp(sizes: list[int] | tuple[int, ...], rng: np.random.Generator) -> Mlp:
    """Xavier-normal weights, zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights = []
    biases = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (n_in + n_out))
        weights.append(rng.normal(0.0, scale, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(weights=weights, biases=biases)


def parameters(net: Mlp) -> list[np.ndarray]:
    """Flat parameter list (weights then bias per layer); arrays are live views."""
    out: list[np.ndarray] = []
    for w, b in zip(net.weights, net.biases):
        out.append(w)
        out.append(b)
    return out


def n_params(net: Mlp) -> int:
    return sum(p.size for p in parameters(net))


def flop_count(net: Mlp) -> int:
    """Floating-point ops for one forward pass (multiply-adds counted as 2)."""
    total = 0
    for w in net.weights:
        n_out, n_in = w.shape
        total += 2 * n_in * n_out + 2 * n_out  # matmul + bias + activation
    return total


@dataclass
class Tape:
    """Activation record from a forward pass, sufficient for exact gradients."""

    activations: list[np.ndarray]  # activations[0] is the input
    batched: bool


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the net on a vector or a (batch, in_dim) matrix."""
    a = np.asarray(x, dtype=np.float64)
    batched = a.ndim == 2
    if not batched:
        if a.shape != (net.in_dim,):
            raise ValueError(f"input has shape {a.shape}, expected ({net.in_dim},)")
        a = a[None, :]
    elif a.shape[1] != net.in_dim:
        raise ValueError(f"input has {a.shape[1]} features, expected {net.in_dim}")
    acts = [a]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        a = z if i == last else np.tanh(z)
        acts.append(a)
    out = acts[-1]
    return (out if batched else out[0]), Tape(activations=acts, batched=batched)


@dataclass
class Grads:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]


def backward(net: Mlp, tape: Tape, output_gradient: np.ndarray) -> tuple[Grads, np.ndarray]:
    """Exact gradients of the scalar loss whose output gradient is supplied.

    Returns the parameter gradients and the gradient with respect to the
    input (needed to chain the encoder through the velocity field). Batch
    contributions are reduced with a single matrix product, so the result
    does not depend on any worker count.
    """
    g = np.asarray(output_gradient, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    acts = tape.activations
    if len(acts) != len(net.weights) + 1 or g.shape != acts[-1].shape:
        raise ValueError("tape does not match the network/output gradient")
    d_w: list[np.ndarray] = [np.empty(0)] * len(net.weights)
    d_b: list[np.ndarray] = [np.empty(0)] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        d_w[i] = g.T @ acts[i]
        d_b[i] = g.sum(axis=0)
        g = g @ net.weights[i]
        if i > 0:
            g = g * (1.0 - acts[i] ** 2)  # tanh'(z) = 1 - tanh(z)^2
    return Grads(d_weights=d_w, d_biases=d_b), (g if tape.batched else g[0])


def grad_list(grads: Grads) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for dw, db in zip(grads.d_weights, grads.d_biases):
        out.append(dw)
        out.append(db)
    return out


@dataclass
class OptimState:
    """AdamW accumulators for a fixed parameter list."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optim(
    params: list[np.ndarray], lr: float, weight_decay: float = 0.0
) -> OptimState:
    return OptimState(
        lr=lr,
        weight_decay=weight_decay,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adamw_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: OptimState
) -> OptimState:
    """One AdamW update with decoupled weight decay; parameters update in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state do not match")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def optim_step(net: Mlp, grads: Grads, state: OptimState) -> tuple[Mlp, OptimState]:
    """AdamW step over a single net; returns the same (mutated) objects."""
    adamw_step(parameters(net), grad_list(grads), state)
    return net, state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients together so their joint L2 norm is at most max_norm."""
    if max_norm <= 0.0:
        return grads
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads
