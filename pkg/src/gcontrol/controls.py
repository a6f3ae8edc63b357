"""Strict and relaxed controls on a finite action grid.

A strict control picks one action per grid step; a relaxed control puts
a probability weight vector over the action grid on every step. The
embedding sends a strict control to its one-hot weights, and the
chattering construction goes the other way: it converts a relaxed
control into a strict one whose per-block occupation of each action
matches the averaged weights up to one grid step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .scenarios import TimeGrid

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class ActionGrid:
    """Finite set of actions (scalar suite)."""

    actions: np.ndarray

    def __post_init__(self):
        actions = np.atleast_1d(np.asarray(self.actions, dtype=float))
        if actions.ndim != 1 or actions.size == 0:
            raise ValueError("action grid must be a nonempty flat list")
        if len(np.unique(actions)) != actions.size:
            raise ValueError("actions must be distinct")
        actions.setflags(write=False)
        object.__setattr__(self, "actions", actions)

    @property
    def n_actions(self) -> int:
        return self.actions.size

    def index_of(self, value: float) -> int:
        hits = np.flatnonzero(self.actions == value)
        if hits.size != 1:
            raise ValueError(f"action value {value} is not on the grid")
        return int(hits[0])


@dataclass(frozen=True)
class StrictControl:
    """Piecewise-constant open-loop control: one action index per step."""

    grid: ActionGrid
    indices: np.ndarray

    def __post_init__(self):
        idx = np.atleast_1d(np.asarray(self.indices, dtype=np.int64))
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("control needs at least one step")
        if idx.min() < 0 or idx.max() >= self.grid.n_actions:
            raise ValueError("control indices leave the action grid")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def n_steps(self) -> int:
        return self.indices.size

    @property
    def values(self) -> np.ndarray:
        return self.grid.actions[self.indices]


@dataclass(frozen=True)
class RelaxedControl:
    """Per-step probability weights over the action grid."""

    grid: ActionGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] == 0:
            raise ValueError("weights must have shape (n_steps, n_actions)")
        if w.shape[1] != self.grid.n_actions:
            raise ValueError("weight columns must match the action grid")
        if np.any(w < -_WEIGHT_TOL) or np.any(w > 1 + _WEIGHT_TOL):
            raise ValueError("weights must lie in [0, 1]")
        sums = w.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _WEIGHT_TOL):
            k = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"weights at step {k} sum to {sums[k]}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_steps(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class SpikeSpec:
    """Replace the base control by one action on a window [t0, t0 + width)."""

    base: StrictControl
    action_index: int
    t0: float
    width: float

    def __post_init__(self):
        if not 0 <= self.action_index < self.base.grid.n_actions:
            raise ValueError("spike action leaves the action grid")
        if self.t0 < 0 or self.width <= 0:
            raise ValueError("spike needs t0 >= 0 and width > 0")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def embed_strict(u: StrictControl) -> RelaxedControl:
    """One-hot weights at u's index on every step (exact zeros and ones)."""
    w = np.zeros((u.n_steps, u.grid.n_actions))
    w[np.arange(u.n_steps), u.indices] = 1.0
    return RelaxedControl(grid=u.grid, weights=w)


def chattering(mu: RelaxedControl, n: int) -> StrictControl:
    """Strict control matching mu's averaged occupation on n equal blocks.

    Within each block the weights are averaged, each action gets
    floor(average * block_steps) consecutive steps in grid order, and the
    leftover steps go to the largest remainders (ties to the lower action
    index). The occupation error per action per block is below one step.
    """
    K = mu.n_steps
    if n < 1:
        raise ValueError("block count must be at least 1")
    if K % n != 0:
        raise ValueError(f"block count {n} does not divide n_steps {K}")
    L = K // n
    m = mu.grid.n_actions
    indices = np.empty(K, dtype=np.int64)
    for j in range(n):
        block = slice(j * L, (j + 1) * L)
        quota = mu.weights[block].sum(axis=0)
        base = np.floor(quota).astype(np.int64)
        leftover = L - int(base.sum())
        remainder = quota - base
        order = np.argsort(-remainder, kind="stable")
        base[order[:leftover]] += 1
        indices[block] = np.repeat(np.arange(m), base)
    return StrictControl(grid=mu.grid, indices=indices)


def spike(spec: SpikeSpec, grid: TimeGrid) -> StrictControl:
    """Apply a spike perturbation; the window must align with grid steps."""
    k0, span = spike_steps(spec, grid)
    idx = spec.base.indices.copy()
    idx[k0 : k0 + span] = spec.action_index
    return StrictControl(grid=spec.base.grid, indices=idx)


def spike_steps(spec: SpikeSpec, grid: TimeGrid) -> tuple[int, int]:
    """Resolve a spike window to (first step, step count), rejecting misalignment."""
    if spec.base.n_steps != grid.n_steps:
        raise ValueError("spike base control and grid disagree on n_steps")
    dt = grid.dt
    k0_f = spec.t0 / dt
    span_f = spec.width / dt
    k0 = round(k0_f)
    span = round(span_f)
    if abs(k0_f - k0) > 1e-9 or abs(span_f - span) > 1e-9:
        raise ValueError("spike window must align with grid steps (width a multiple of dt)")
    if span < 1 or k0 < 0 or k0 + span > grid.n_steps:
        raise ValueError("spike window leaves [0, T]")
    return int(k0), int(span)


def ekeland_distance(u: StrictControl, v: StrictControl, grid: TimeGrid) -> float:
    """Lebesgue measure of the set where the two controls disagree."""
    if u.n_steps != v.n_steps or u.n_steps != grid.n_steps:
        raise ValueError("controls must share the grid")
    return float(grid.dt * np.count_nonzero(u.values != v.values))


def stable_convergence_gap(
    mu: RelaxedControl,
    u: StrictControl,
    test_functions: Sequence[Callable[[float, float], float]],
    grid: TimeGrid,
) -> float:
    """Largest paired-integral gap over the test functions.

    Both integrals are left-endpoint quadratures on the grid: the relaxed
    side weighs phi(t_k, a) by the step's weights, the strict side plugs
    in the chosen action.
    """
    if mu.n_steps != grid.n_steps or u.n_steps != grid.n_steps:
        raise ValueError("controls must live on the grid")
    if not np.array_equal(mu.grid.actions, u.grid.actions):
        raise ValueError("controls must share the action grid")
    times = grid.times[:-1]
    actions = mu.grid.actions
    worst = 0.0
    for phi in test_functions:
        vals = np.array([[float(phi(t, a)) for a in actions] for t in times])
        relaxed = float((mu.weights * vals).sum() * grid.dt)
        strict = float(vals[np.arange(grid.n_steps), u.indices].sum() * grid.dt)
        worst = max(worst, abs(relaxed - strict))
    return worst


def uniform_relaxed(grid_actions: ActionGrid, n_steps: int) -> RelaxedControl:
    """Equal weights on every action at every step."""
    m = grid_actions.n_actions
    w = np.full((n_steps, m), 1.0 / m)
    return RelaxedControl(grid=grid_actions, weights=w)


def constant_strict(grid_actions: ActionGrid, n_steps: int, index: int) -> StrictControl:
    """The control that plays one action index throughout."""
    return StrictControl(grid=grid_actions, indices=np.full(n_steps, index, dtype=np.int64))
