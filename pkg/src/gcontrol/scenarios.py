"""Volatility-scenario families and the sublinear expectation they induce.

The ambiguity set is a finite family of deterministic piecewise-constant
volatility paths ``a_t`` squeezed between two matrix bounds in the
positive-semidefinite order. Under a fixed scenario the driving noise is
a classical Brownian motion whose step-``k`` increment has covariance
``a_k * dt``; the upper expectation of a payoff is the maximum of its
per-scenario means. Noise is generated once per seed and shared across
scenarios (common random numbers), so scenario comparisons difference
out the Monte Carlo noise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import rng

_SYM_TOL = 1e-12
_ORDER_TOL = 1e-10


def _as_matrix(value) -> np.ndarray:
    """Coerce a scalar or array-like to a square float matrix."""
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {arr.shape}")
    return arr


def _check_symmetric(mat: np.ndarray, name: str, tol: float = _SYM_TOL) -> None:
    if not np.all(np.abs(mat - mat.T) <= tol):
        raise ValueError(f"{name} is not symmetric within {tol}")


def _min_eig(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(mat).min())


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive-semidefinite matrix.

    Eigenvalues in ``[-1e-12, 0)`` are treated as rounding noise and
    clamped to zero; anything more negative is an error.
    """
    mat = _as_matrix(mat)
    w, v = np.linalg.eigh(mat)
    if np.any(w < -1e-12):
        raise ValueError(f"matrix is not positive semidefinite: min eigenvalue {w.min()}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with ``n_steps`` steps."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) < 1 or int(self.n_steps) != self.n_steps:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        """Grid times, length ``n_steps + 1``."""
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass(frozen=True)
class VolatilityBounds:
    """Matrix interval [sigma_low, sigma_high] for the step volatility."""

    sigma_low: np.ndarray
    sigma_high: np.ndarray

    def __post_init__(self):
        low = _as_matrix(self.sigma_low)
        high = _as_matrix(self.sigma_high)
        if low.shape != high.shape:
            raise ValueError("sigma_low and sigma_high must have the same shape")
        _check_symmetric(low, "sigma_low")
        _check_symmetric(high, "sigma_high")
        if _min_eig(low) < -_ORDER_TOL:
            raise ValueError("sigma_low must be positive semidefinite")
        if _min_eig(high) <= 0:
            raise ValueError("sigma_high must be positive definite")
        if _min_eig(high - low) < -_ORDER_TOL:
            raise ValueError("sigma_high - sigma_low must be positive semidefinite")
        low.setflags(write=False)
        high.setflags(write=False)
        object.__setattr__(self, "sigma_low", low)
        object.__setattr__(self, "sigma_high", high)

    @property
    def dim(self) -> int:
        return self.sigma_low.shape[0]

    @property
    def ellipticity_beta(self) -> float:
        """Half the smallest eigenvalue of the lower bound."""
        return max(0.0, _min_eig(self.sigma_low)) / 2.0


@dataclass(frozen=True)
class VolatilityScenario:
    """One deterministic piecewise-constant volatility path.

    ``values`` has shape (n_steps, d, d); each slice is the covariance
    rate ``a_k`` in force on step ``k``.
    """

    id: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None, None]
        if vals.ndim != 3 or vals.shape[1] != vals.shape[2]:
            raise ValueError(f"scenario values must have shape (n_steps, d, d), got {vals.shape}")
        if not np.all(np.abs(vals - np.swapaxes(vals, 1, 2)) <= _SYM_TOL):
            raise ValueError("scenario values must be symmetric at every step")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "id", int(self.id))

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def scenario_within_bounds(scenario: VolatilityScenario, bounds: VolatilityBounds) -> bool:
    """True when sigma_low <= a_k <= sigma_high in the matrix order at every step."""
    lo = scenario.values - bounds.sigma_low[None]
    hi = bounds.sigma_high[None] - scenario.values
    eig_lo = np.linalg.eigvalsh(lo).min()
    eig_hi = np.linalg.eigvalsh(hi).min()
    return bool(eig_lo >= -_ORDER_TOL and eig_hi >= -_ORDER_TOL)


@dataclass(frozen=True)
class ScenarioFamily:
    """Finite, ordered stand-in for the ambiguity set of laws."""

    bounds: VolatilityBounds
    scenarios: tuple[VolatilityScenario, ...]

    def __post_init__(self):
        scen = tuple(self.scenarios)
        if not scen:
            raise ValueError("scenario family must be nonempty")
        ids = [s.id for s in scen]
        if ids != list(range(len(scen))):
            raise ValueError(f"scenario ids must be dense 0..m-1 in order, got {ids}")
        steps = {s.n_steps for s in scen}
        if len(steps) != 1:
            raise ValueError("all scenarios must live on the same grid")
        for s in scen:
            if not scenario_within_bounds(s, self.bounds):
                raise ValueError(f"scenario {s.id} leaves the volatility bounds")
        object.__setattr__(self, "scenarios", scen)

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def n_steps(self) -> int:
        return self.scenarios[0].n_steps

    @property
    def dim(self) -> int:
        return self.bounds.dim

    def values_array(self) -> np.ndarray:
        """Stack of scenario values, shape (m, n_steps, d, d)."""
        return np.stack([s.values for s in self.scenarios])

    def scalar_values(self) -> np.ndarray:
        """Scenario values as scalars, shape (m, n_steps). Requires d = 1."""
        if self.dim != 1:
            raise ValueError("scalar_values requires a one-dimensional noise")
        return self.values_array()[:, :, 0, 0]


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments per (scenario, path, step) plus the raw draws.

    ``xi`` holds the standard-normal draws shared by every scenario;
    ``dB[s, p, k] = sqrt(a_k^(s)) @ xi[p, k] * sqrt(dt)``.
    """

    seed: int
    xi: np.ndarray
    dB: np.ndarray

    @property
    def n_scenarios(self) -> int:
        return self.dB.shape[0]

    @property
    def n_paths(self) -> int:
        return self.dB.shape[1]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[2]

    def scalar_dB(self) -> np.ndarray:
        """Increments as scalars, shape (m, n_paths, n_steps). Requires d = 1."""
        if self.dB.shape[-1] != 1:
            raise ValueError("scalar_dB requires a one-dimensional noise")
        return self.dB[..., 0]


class UpperMean(NamedTuple):
    value: float
    scenario_id: int
    stderr: float


class QVPath(NamedTuple):
    increments: np.ndarray  # (n_steps, d, d)
    cumulative: np.ndarray  # (n_steps + 1, d, d)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def build_scenario_family(
    bounds: VolatilityBounds,
    grid: TimeGrid,
    strategy: str = "corners",
    *,
    blocks: int = 2,
    count: int | None = None,
    seed: int | None = None,
) -> ScenarioFamily:
    """Build a finite scenario family.

    ``corners`` enumerates every piecewise-constant path taking the value
    sigma_low or sigma_high on each of ``blocks`` coarse blocks (duplicates
    collapse, so a degenerate interval yields a single scenario).
    ``random`` draws ``count`` paths uniformly on the order interval.
    """
    K = grid.n_steps
    paths: list[np.ndarray] = []
    if strategy == "corners":
        if blocks < 1:
            raise ValueError("corner strategy needs at least one block")
        chunks = np.array_split(np.arange(K), min(blocks, K))
        corners = (bounds.sigma_low, bounds.sigma_high)
        seen = set()
        for combo in itertools.product(range(2), repeat=len(chunks)):
            vals = np.empty((K, bounds.dim, bounds.dim))
            for chunk, which in zip(chunks, combo):
                vals[chunk] = corners[which]
            key = vals.tobytes()
            if key in seen:
                continue
            seen.add(key)
            paths.append(vals)
    elif strategy == "random":
        if count is None or count < 1:
            raise ValueError("random strategy needs count >= 1")
        if seed is None:
            raise ValueError("random strategy needs a seed")
        gen = rng.substream(seed, rng.SCENARIOS)
        u = gen.uniform(size=(count, K))
        span = bounds.sigma_high - bounds.sigma_low
        for i in range(count):
            vals = bounds.sigma_low[None] + u[i][:, None, None] * span[None]
            paths.append(vals)
    else:
        raise ValueError(f"unknown scenario strategy {strategy!r}")
    scenarios = tuple(VolatilityScenario(i, v) for i, v in enumerate(paths))
    return ScenarioFamily(bounds=bounds, scenarios=scenarios)


def sample_brownian(family: ScenarioFamily, grid: TimeGrid, n_paths: int, seed: int) -> NoiseBundle:
    """Sample Brownian increments for every scenario under common random numbers.

    Parameters
    ----------
    family, grid
        Scenario family and the grid its values live on.
    n_paths
        Number of Monte Carlo paths; the standard-normal draws ``xi`` are
        generated once and reused by every scenario.
    seed
        Substream seed; identical seeds give bit-identical bundles.

    Returns
    -------
    NoiseBundle
        ``dB[s, p, k] = sqrt(a_k^(s)) xi[p, k] sqrt(dt)`` so that the
        step covariance under scenario ``s`` is ``a_k dt``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if family.n_steps != grid.n_steps:
        raise ValueError("family and grid disagree on n_steps")
    d = family.dim
    K = grid.n_steps
    xi = rng.substream(seed, rng.BROWNIAN).standard_normal((n_paths, K, d))
    vals = family.values_array()
    roots = np.empty_like(vals)
    for s in range(family.n_scenarios):
        for k in range(K):
            roots[s, k] = psd_sqrt(vals[s, k])
    dB = np.sqrt(grid.dt) * np.einsum("skij,pkj->spki", roots, xi)
    xi.setflags(write=False)
    dB.setflags(write=False)
    return NoiseBundle(seed=int(seed), xi=xi, dB=dB)


def quadratic_variation(scenario: VolatilityScenario, grid: TimeGrid) -> QVPath:
    """Per-step quadratic-variation increments ``a_k dt`` and their cumulative sums."""
    if scenario.n_steps != grid.n_steps:
        raise ValueError("scenario and grid disagree on n_steps")
    inc = scenario.values * grid.dt
    cum = np.concatenate([np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)])
    return QVPath(increments=inc, cumulative=cum)


def upper_expectation(per_scenario_samples: Sequence[np.ndarray]) -> UpperMean:
    """Maximum of per-scenario sample means.

    Ties go to the lowest scenario id; the reported standard error is
    that of the winning scenario's mean.
    """
    if len(per_scenario_samples) == 0:
        raise ValueError("upper_expectation needs at least one scenario")
    means = []
    errs = []
    for s, samples in enumerate(per_scenario_samples):
        arr = np.asarray(samples, dtype=float)
        if arr.size < 2:
            raise ValueError(f"scenario {s} needs at least 2 samples")
        means.append(float(arr.mean()))
        errs.append(float(arr.std(ddof=1) / np.sqrt(arr.size)))
    best = int(np.argmax(means))
    return UpperMean(value=means[best], scenario_id=best, stderr=errs[best])


def generator_G(
    S,
    bounds: VolatilityBounds,
    probes: Iterable[np.ndarray] | None = None,
) -> float:
    """Evaluate the volatility-ambiguity generator ``G(S) = max_a tr[aS] / 2``.

    The probe set defaults to the two bound corners; callers may append
    scenario values. For symmetric ``A >= Abar`` in the matrix order this
    G satisfies ``G(A) - G(Abar) >= beta tr[A - Abar]`` with
    ``beta = lambda_min(sigma_low) / 2``, because every probe dominates
    sigma_low.
    """
    S = _as_matrix(S)
    if not np.all(np.abs(S - S.T) <= _ORDER_TOL):
        raise ValueError("generator_G needs a symmetric argument")
    probe_list = [bounds.sigma_low, bounds.sigma_high]
    if probes is not None:
        probe_list.extend(_as_matrix(p) for p in probes)
    traces = [float(np.trace(a @ S)) for a in probe_list]
    return 0.5 * max(traces)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def family_to_dict(family: ScenarioFamily, grid: TimeGrid) -> dict:
    return {
        "dim": family.dim,
        "sigma_low": family.bounds.sigma_low.tolist(),
        "sigma_high": family.bounds.sigma_high.tolist(),
        "grid": {"T": grid.T, "n_steps": grid.n_steps},
        "scenarios": [{"id": s.id, "values": s.values.tolist()} for s in family.scenarios],
    }


def family_from_dict(doc: dict) -> tuple[ScenarioFamily, TimeGrid]:
    bounds = VolatilityBounds(np.asarray(doc["sigma_low"]), np.asarray(doc["sigma_high"]))
    grid = TimeGrid(T=doc["grid"]["T"], n_steps=doc["grid"]["n_steps"])
    scenarios = tuple(
        VolatilityScenario(entry["id"], np.asarray(entry["values"])) for entry in doc["scenarios"]
    )
    return ScenarioFamily(bounds=bounds, scenarios=scenarios), grid
