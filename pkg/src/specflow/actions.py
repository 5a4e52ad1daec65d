"""Action chunks, channel layout, and per-channel standardization.

Every model in the package exchanges H x D action matrices whose last
channel is the gripper command; the channels before it are continuous
position/rotation deltas. Chunks carry a space tag so raw (environment
units) and standardized (model units) values can never be mixed silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RAW = "raw"
STANDARDIZED = "standardized"

_MIN_STD = 1e-6


@dataclass(frozen=True)
class ChannelLayout:
    """Channel split of a per-step action: positions, rotations, then one gripper."""

    pos_dims: int
    rot_dims: int = 0

    def __post_init__(self) -> None:
        if self.pos_dims < 0 or self.rot_dims < 0:
            raise ValueError("channel counts must be non-negative")
        if self.pos_dims + self.rot_dims < 1:
            raise ValueError("layout needs at least one continuous channel")

    @property
    def continuous_dims(self) -> int:
        return self.pos_dims + self.rot_dims

    @property
    def dim(self) -> int:
        return self.continuous_dims + 1

    @property
    def gripper_index(self) -> int:
        # gripper is always the last channel
        return self.dim - 1


def _as_matrix(values: np.ndarray) -> np.ndarray:
    out = np.asarray(values, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"chunk values must be 2-D, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class ActionChunk:
    """An H x D matrix of future per-step actions plus its space tag."""

    values: np.ndarray
    layout: ChannelLayout
    space: str

    def __post_init__(self) -> None:
        vals = _as_matrix(self.values).copy()
        if vals.shape[0] < 1:
            raise ValueError("chunk horizon must be positive")
        if vals.shape[1] != self.layout.dim:
            raise ValueError(
                f"chunk has {vals.shape[1]} channels, layout expects {self.layout.dim}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("chunk contains non-finite entries")
        if self.space not in (RAW, STANDARDIZED):
            raise ValueError(f"unknown space tag {self.space!r}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def horizon(self) -> int:
        return int(self.values.shape[0])

    def gripper_channel(self) -> np.ndarray:
        return self.values[:, self.layout.gripper_index]


@dataclass(frozen=True)
class Standardizer:
    """Per-channel affine map between raw and standardized action values."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        std = np.asarray(self.std, dtype=np.float64).copy()
        if mean.ndim != 1 or std.shape != mean.shape:
            raise ValueError("mean and std must be matching 1-D vectors")
        if np.any(std <= 0.0):
            raise ValueError("std entries must be positive")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def fit(cls, values: np.ndarray, min_std: float = _MIN_STD) -> "Standardizer":
        """Per-channel mean/std over a stack of action rows; tiny stds are clamped."""
        rows = _as_matrix(values)
        mean = rows.mean(axis=0)
        std = np.maximum(rows.std(axis=0), min_std)
        return cls(mean=mean, std=std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def _check_dims(chunk: ActionChunk, s: Standardizer) -> None:
    if chunk.layout.dim != s.dim:
        raise ValueError(
            f"standardizer has {s.dim} channels, chunk has {chunk.layout.dim}"
        )


def standardize(chunk: ActionChunk, s: Standardizer) -> ActionChunk:
    """Map a raw chunk into standardized model units."""
    if chunk.space != RAW:
        raise ValueError("standardize expects a raw chunk")
    _check_dims(chunk, s)
    return ActionChunk(values=s.apply(chunk.values), layout=chunk.layout, space=STANDARDIZED)


def destandardize(chunk: ActionChunk, s: Standardizer) -> ActionChunk:
    """Exact inverse of :func:`standardize`."""
    if chunk.space != STANDARDIZED:
        raise ValueError("destandardize expects a standardized chunk")
    _check_dims(chunk, s)
    return ActionChunk(values=s.invert(chunk.values), layout=chunk.layout, space=RAW)


def continuous_distance(
    a: np.ndarray, b: np.ndarray, layout: ChannelLayout, metric: str = "l2"
) -> float:
    """Distance between two per-step actions over position+rotation channels only.

    The gripper channel is excluded; it carries discrete open/close semantics
    and is handled by the phase detector instead. Inputs are expected in
    standardized space (enforced at the chunk level).
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != (layout.dim,) or bv.shape != (layout.dim,):
        raise ValueError("action vectors do not match the layout")
    diff = av[: layout.continuous_dims] - bv[: layout.continuous_dims]
    if metric == "l2":
        return float(np.sqrt(np.sum(diff * diff)))
    if metric == "linf":
        return float(np.max(np.abs(diff)))
    raise ValueError(f"unknown metric {metric!r}")


def continuous_distances(
    a_values: np.ndarray, b_values: np.ndarray, layout: ChannelLayout, metric: str = "l2"
) -> np.ndarray:
    """Per-step continuous distances between two H x D value matrices."""
    av = _as_matrix(a_values)
    bv = _as_matrix(b_values)
    if av.shape != bv.shape or av.shape[1] != layout.dim:
        raise ValueError("value matrices do not match the layout")
    diff = av[:, : layout.continuous_dims] - bv[:, : layout.continuous_dims]
    if metric == "l2":
        return np.sqrt(np.sum(diff * diff, axis=1))
    if metric == "linf":
        return np.max(np.abs(diff), axis=1) if diff.shape[1] else np.zeros(av.shape[0])
    raise ValueError(f"unknown metric {metric!r}")


def chunk_distances(a: ActionChunk, b: ActionChunk, metric: str = "l2") -> np.ndarray:
    """Per-step continuous distances between two standardized chunks."""
    if a.space != STANDARDIZED or b.space != STANDARDIZED:
        raise ValueError("continuous distances are defined in standardized space only")
    if a.layout != b.layout:
        raise ValueError("chunks have different layouts")
    return continuous_distances(a.values, b.values, a.layout, metric)


def gripper_switch(
    values: np.ndarray,
    layout: ChannelLayout,
    current_sign: float,
    window: int | None = None,
) -> bool:
    """True iff any scanned step's standardized gripper value flips sign.

    ``current_sign`` is the robot's present gripper state in standardized
    units (+/-1 after sign extraction). A value of exactly zero counts as a
    switch boundary and triggers.
    """
    if current_sign not in (-1.0, 1.0):
        raise ValueError("current_sign must be -1.0 or +1.0")
    vals = _as_matrix(values)
    g = vals[:, layout.gripper_index]
    if window is not None:
        g = g[: max(int(window), 0)]
    return bool(np.any(g * current_sign <= 0.0))
