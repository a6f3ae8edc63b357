"""Euler simulation of the controlled jump-diffusion, strict and relaxed.

Both simulators walk the same grid with left-endpoint coefficients and
subtract the jump compensator every step. The relaxed simulator averages
b and gamma under the step's weights and evaluates f at each event's
action tag; its weighted sums are accumulated in fixed grid order, so a
one-hot (embedded strict) control reproduces the strict simulation bit
for bit under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from . import jumps as jumps_mod
from . import scenarios as scen_mod
from .controls import RelaxedControl, StrictControl
from .jumps import JumpPath, MarkSpace
from .models import ModelSpec, ensure_validated
from .scenarios import NoiseBundle, ScenarioFamily, TimeGrid

Control = Union[StrictControl, RelaxedControl]


@dataclass(frozen=True)
class StateEnsemble:
    """Simulated state paths indexed by (scenario, path).

    ``states`` has shape (n_scenarios, n_paths, n_steps + 1). The bundle
    keeps everything a downstream consumer needs to reuse the same
    randomness: the noise, the jump paths with dense per-step counts,
    and the control that produced the run.
    """

    states: np.ndarray
    noise: NoiseBundle
    jump_paths: list[JumpPath]
    counts: np.ndarray
    tagged_counts: np.ndarray | None
    model: ModelSpec
    family: ScenarioFamily
    grid: TimeGrid
    marks: MarkSpace
    control: Control
    seed: int
    x0: float

    @property
    def n_scenarios(self) -> int:
        return self.states.shape[0]

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.states.shape[2] - 1

    @property
    def is_relaxed(self) -> bool:
        return isinstance(self.control, RelaxedControl)


class DistanceReport(NamedTuple):
    sup: np.ndarray  # (n_scenarios, n_paths) per-path sup_t |x1 - x2|
    mean_square: np.ndarray  # (n_scenarios,) cross-path mean of sup^2


def _check_finite(x: np.ndarray, k: int, s: int) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.count_nonzero(~np.isfinite(x)))
        raise FloatingPointError(
            f"non-finite state after step {k} under scenario {s} on {bad} paths; "
            "the scheme diverged (check coefficients and dt)"
        )


def simulate_strict(
    model: ModelSpec,
    u: StrictControl,
    family: ScenarioFamily,
    grid: TimeGrid,
    marks: MarkSpace,
    noise: NoiseBundle,
    jump_paths: list[JumpPath],
    x0: float,
) -> StateEnsemble:
    """Simulate the strict system under every scenario.

    One Euler step under scenario s is

        x'  =  x + b(t, x, u_k) dt + sigma(t, x) dB
             + gamma(t, x, u_k) a_k dt
             + sum_i f(t, x, theta_i, u_k) (dN_i - nu_i dt)

    with every coefficient read at the left endpoint and jumps acting on
    the pre-jump state.
    """
    ensure_validated(model)
    if u.n_steps != grid.n_steps or family.n_steps != grid.n_steps:
        raise ValueError("control, family and grid must agree on n_steps")
    if noise.n_steps != grid.n_steps:
        raise ValueError("noise bundle lives on a different grid")
    S, P, K = noise.n_scenarios, noise.n_paths, grid.n_steps
    if len(jump_paths) != P:
        raise ValueError("jump paths must match the noise bundle's path count")
    dB = noise.scalar_dB()
    counts = jumps_mod.dense_counts(jump_paths, grid, marks.n_marks)
    a_vals = family.scalar_values()
    nu = marks.intensities
    theta = marks.marks
    dt = grid.dt
    times = grid.times
    u_vals = u.values
    x = np.empty((S, P, K + 1))
    x[:, :, 0] = x0
    for s in range(S):
        for k in range(K):
            t = times[k]
            a = float(a_vals[s, k])
            uk = float(u_vals[k])
            xk = x[s, :, k]
            incr = model.b(t, xk, uk) * dt
            incr = incr + model.sigma(t, xk) * dB[s, :, k]
            incr = incr + model.gamma(t, xk, uk) * (a * dt)
            jump_sum = 0.0
            comp_rate = 0.0
            for i in range(marks.n_marks):
                fi = model.f(t, xk, float(theta[i]), uk)
                jump_sum = jump_sum + fi * counts[:, k, i]
                comp_rate = comp_rate + fi * nu[i]
            x[s, :, k + 1] = xk + (incr + (jump_sum - comp_rate * dt))
            _check_finite(x[s, :, k + 1], k, s)
    return StateEnsemble(
        states=x,
        noise=noise,
        jump_paths=jump_paths,
        counts=counts,
        tagged_counts=None,
        model=model,
        family=family,
        grid=grid,
        marks=marks,
        control=u,
        seed=noise.seed,
        x0=float(x0),
    )


def simulate_relaxed(
    model: ModelSpec,
    mu: RelaxedControl,
    family: ScenarioFamily,
    grid: TimeGrid,
    marks: MarkSpace,
    noise: NoiseBundle,
    tagged_paths: list[JumpPath],
    x0: float,
) -> StateEnsemble:
    """Simulate the relaxed system: weight-averaged b and gamma, tagged f.

    The drift and gamma terms average the coefficient over the step's
    weights; each jump contributes f at its own action tag; the
    compensator is the product average sum_i sum_a w_k(a) f(theta_i, a)
    nu_i dt. Sums run over actions in grid order so that one-hot weights
    collapse to the strict expression exactly.
    """
    ensure_validated(model)
    if mu.n_steps != grid.n_steps or family.n_steps != grid.n_steps:
        raise ValueError("control, family and grid must agree on n_steps")
    if noise.n_steps != grid.n_steps:
        raise ValueError("noise bundle lives on a different grid")
    S, P, K = noise.n_scenarios, noise.n_paths, grid.n_steps
    if len(tagged_paths) != P:
        raise ValueError("jump paths must match the noise bundle's path count")
    dB = noise.scalar_dB()
    m = marks.n_marks
    A = mu.grid.n_actions
    tagged = jumps_mod.dense_tagged_counts(tagged_paths, grid, m, A)
    counts = tagged.sum(axis=3, dtype=np.int32)
    a_vals = family.scalar_values()
    nu = marks.intensities
    theta = marks.marks
    actions = mu.grid.actions
    dt = grid.dt
    times = grid.times
    w = mu.weights
    x = np.empty((S, P, K + 1))
    x[:, :, 0] = x0
    for s in range(S):
        for k in range(K):
            t = times[k]
            a = float(a_vals[s, k])
            xk = x[s, :, k]
            b_bar = 0.0
            g_bar = 0.0
            for al in range(A):
                av = float(actions[al])
                b_bar = b_bar + w[k, al] * model.b(t, xk, av)
                g_bar = g_bar + w[k, al] * model.gamma(t, xk, av)
            incr = b_bar * dt
            incr = incr + model.sigma(t, xk) * dB[s, :, k]
            incr = incr + g_bar * (a * dt)
            jump_sum = 0.0
            comp_rate = 0.0
            for i in range(m):
                th = float(theta[i])
                jump_i = 0.0
                f_bar = 0.0
                for al in range(A):
                    av = float(actions[al])
                    f_ia = model.f(t, xk, th, av)
                    jump_i = jump_i + f_ia * tagged[:, k, i, al]
                    f_bar = f_bar + w[k, al] * f_ia
                jump_sum = jump_sum + jump_i
                comp_rate = comp_rate + f_bar * nu[i]
            x[s, :, k + 1] = xk + (incr + (jump_sum - comp_rate * dt))
            _check_finite(x[s, :, k + 1], k, s)
    return StateEnsemble(
        states=x,
        noise=noise,
        jump_paths=tagged_paths,
        counts=counts,
        tagged_counts=tagged,
        model=model,
        family=family,
        grid=grid,
        marks=marks,
        control=mu,
        seed=noise.seed,
        x0=float(x0),
    )


def simulate(
    model: ModelSpec,
    control: Control,
    family: ScenarioFamily,
    grid: TimeGrid,
    marks: MarkSpace,
    n_paths: int,
    seed: int,
    x0: float,
) -> StateEnsemble:
    """Sample noise and jumps from the seed, then simulate.

    Strict and relaxed runs with the same seed share the Brownian draws
    and the base jump events (tags come from a separate substream), so
    cross-control comparisons are common-random-number pairings.
    """
    noise = scen_mod.sample_brownian(family, grid, n_paths, seed)
    if isinstance(control, RelaxedControl):
        paths = jumps_mod.sample_relaxed_poisson(control, marks, grid, n_paths, seed)
        return simulate_relaxed(model, control, family, grid, marks, noise, paths, x0)
    paths = jumps_mod.sample_poisson(marks, grid, n_paths, seed)
    return simulate_strict(model, control, family, grid, marks, noise, paths, x0)


def sup_distance(e1: StateEnsemble, e2: StateEnsemble) -> DistanceReport:
    """Pathwise sup distance and its per-scenario mean square.

    Both ensembles must come from the same seed (common random numbers);
    comparing independently seeded runs would measure noise, not the
    controls' effect.
    """
    if e1.states.shape != e2.states.shape:
        raise ValueError("ensembles have mismatched (scenario, path, step) shape")
    if e1.seed != e2.seed:
        raise ValueError("sup_distance requires common random numbers (equal seeds)")
    diff = np.abs(e1.states - e2.states)
    sup = diff.max(axis=2)
    return DistanceReport(sup=sup, mean_square=(sup**2).mean(axis=1))
