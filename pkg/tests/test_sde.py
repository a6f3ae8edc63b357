import numpy as np
import pytest

from gcontrol import models as md
from gcontrol import sde
from gcontrol.controls import (
    ActionGrid,
    RelaxedControl,
    StrictControl,
    chattering,
    constant_strict,
    embed_strict,
)
from gcontrol.jumps import MarkSpace, sample_poisson, sample_relaxed_poisson
from gcontrol.scenarios import TimeGrid, VolatilityBounds, build_scenario_family, sample_brownian


MARKS = MarkSpace(marks=np.array([-0.4, 0.6]), intensities=np.array([0.7, 0.3]))
QUIET = MarkSpace(marks=np.array([1.0]), intensities=np.array([0.0]))
ACTIONS = ActionGrid(np.array([-1.0, 0.5, 2.0]))


def _family(lo, hi, grid, blocks=1):
    return build_scenario_family(VolatilityBounds(lo, hi), grid, "corners", blocks=blocks)


def test_zero_model_state_is_constant():
    grid = TimeGrid(T=1.0, n_steps=16)
    fam = _family(1.0, 4.0, grid)
    model = md.build_model("zero", {})
    u = constant_strict(ACTIONS, 16, 1)
    ens = sde.simulate(model, u, fam, grid, MARKS, n_paths=20, seed=3, x0=1.5)
    assert np.all(ens.states == 1.5)


def test_constant_drift_exact_terminal_state():
    grid = TimeGrid(T=1.0, n_steps=16)  # dt is a binary fraction, sum is exact
    fam = _family(1.0, 1.0, grid)
    model = md.build_model("constant_drift", {"mu": 1.0, "sigma0": 0.0})
    u = constant_strict(ACTIONS, 16, 0)
    ens = sde.simulate(model, u, fam, grid, QUIET, n_paths=4, seed=0, x0=2.0)
    assert np.all(ens.states[:, :, -1] == 3.0)


def test_linear_model_mean_matches_oracles():
    params = {"th0": 0.3, "th1": 0.0, "s1": 0.2, "gl": 1.0}
    grid = TimeGrid(T=1.0, n_steps=200)
    fam = _family(1.0, 1.0, grid)
    model = md.build_model("bilinear", params)
    u = constant_strict(ACTIONS, 200, 1)
    P = 20_000
    ens = sde.simulate(model, u, fam, grid, QUIET, n_paths=P, seed=14, x0=1.0)
    xT = ens.states[0, :, -1]
    se = xT.std(ddof=1) / np.sqrt(P)
    u_path = np.zeros(200)  # th1 = 0, control irrelevant
    assert abs(xT.mean() - md.bilinear_mean_discrete(params, grid, 1.0, u_path)) <= 3 * se
    assert abs(xT.mean() - md.bilinear_mean_continuous(params, grid, 1.0, u_path)) <= 3 * se


def test_lq_mean_matches_discrete_moment_recursion():
    params = dict(b1=0.2, b2=0.5, s0=0.3, s1=0.1, c1=0.1, c2=0.3, f1=0.1, f2=0.1, h1=0.5, h2=0.5, gq=0.5)
    grid = TimeGrid(T=1.0, n_steps=64)
    fam = _family(2.0, 2.0, grid)
    model = md.build_model("linear_jump_lq", params)
    u = constant_strict(ACTIONS, 64, 1)  # action 0.5
    P = 20_000
    ens = sde.simulate(model, u, fam, grid, MARKS, n_paths=P, seed=15, x0=1.0)
    xT = ens.states[0, :, -1]
    se = xT.std(ddof=1) / np.sqrt(P)
    u_mean = np.full(64, 0.5)
    m1, _, _ = md.lq_moments_discrete(params, grid, 1.0, u_mean, u_mean**2, np.full(64, 2.0), MARKS)
    assert abs(xT.mean() - m1[-1]) <= 3 * se


def test_relaxed_dirac_reduction_is_bitwise():
    params = dict(b1=0.2, b2=0.5, s0=0.3, s1=0.1, c1=0.1, c2=0.3, f1=0.1, f2=0.1, h1=0.5, h2=0.5, gq=0.5)
    grid = TimeGrid(T=1.0, n_steps=32)
    fam = _family(1.0, 4.0, grid, blocks=2)
    model = md.build_model("linear_jump_lq", params)
    idx = np.tile(np.array([0, 2, 1, 1]), 8)
    u = StrictControl(ACTIONS, idx)
    strict = sde.simulate(model, u, fam, grid, MARKS, n_paths=50, seed=16, x0=1.0)
    relaxed = sde.simulate(model, embed_strict(u), fam, grid, MARKS, n_paths=50, seed=16, x0=1.0)
    assert strict.states.tobytes() == relaxed.states.tobytes()


def test_jump_free_model_ignores_jump_stream():
    # with f identically zero the mark space cannot influence the state
    grid = TimeGrid(T=1.0, n_steps=32)
    fam = _family(1.0, 4.0, grid)
    model = md.build_model("bilinear", {})
    u = constant_strict(ACTIONS, 32, 2)
    busy = sde.simulate(model, u, fam, grid, MARKS, n_paths=40, seed=17, x0=1.0)
    quiet = sde.simulate(model, u, fam, grid, QUIET, n_paths=40, seed=17, x0=1.0)
    assert busy.states.tobytes() == quiet.states.tobytes()


def test_variance_monotone_in_volatility_scenario():
    grid = TimeGrid(T=1.0, n_steps=50)
    fam = _family(1.0, 4.0, grid)  # scenario 0: a=1, scenario 1: a=4
    model = md.build_model("constant_drift", {"mu": 0.0, "sigma0": 1.0})
    u = constant_strict(ACTIONS, 50, 0)
    P = 10_000
    ens = sde.simulate(model, u, fam, grid, QUIET, n_paths=P, seed=18, x0=0.0)
    var = ens.states[:, :, -1].var(axis=1, ddof=1)
    for s, target in ((0, 1.0), (1, 4.0)):
        se = var[s] * np.sqrt(2.0 / (P - 1))
        assert abs(var[s] - target) <= 3 * se
    assert var[1] > var[0]


def test_sup_distance_identity_and_separation():
    grid = TimeGrid(T=1.0, n_steps=32)
    fam = _family(1.0, 1.0, grid)
    model = md.build_model("bilinear", {"th0": -0.2, "th1": 0.6, "s1": 0.0, "gl": 1.0})
    actions = ActionGrid(np.array([0.2, 0.9]))
    ua = constant_strict(actions, 32, 0)
    ub = constant_strict(actions, 32, 1)
    ea = sde.simulate(model, ua, fam, grid, QUIET, n_paths=3, seed=19, x0=1.0)
    eb = sde.simulate(model, ub, fam, grid, QUIET, n_paths=3, seed=19, x0=1.0)
    same = sde.sup_distance(ea, ea)
    assert np.all(same.sup == 0.0) and np.all(same.mean_square == 0.0)
    apart = sde.sup_distance(ea, eb)
    assert np.all(apart.sup > 0.0)
    # deterministic dynamics: sup is attained at the terminal step
    expect = abs(ea.states[0, 0, -1] - eb.states[0, 0, -1])
    assert apart.sup[0, 0] == pytest.approx(expect)


def test_sup_distance_rejects_mismatched_seeds():
    grid = TimeGrid(T=1.0, n_steps=8)
    fam = _family(1.0, 1.0, grid)
    model = md.build_model("zero", {})
    u = constant_strict(ACTIONS, 8, 0)
    e1 = sde.simulate(model, u, fam, grid, QUIET, n_paths=3, seed=1, x0=0.0)
    e2 = sde.simulate(model, u, fam, grid, QUIET, n_paths=3, seed=2, x0=0.0)
    with pytest.raises(ValueError):
        sde.sup_distance(e1, e2)


def test_chattering_approximation_tightens_with_blocks():
    grid = TimeGrid(T=1.0, n_steps=256)
    fam = _family(1.0, 1.0, grid)
    model = md.build_model("bilinear", {"th0": -0.2, "th1": 0.6, "s1": 0.1, "gl": 1.0})
    actions = ActionGrid(np.array([-1.0, 1.0]))
    mu = RelaxedControl(actions, np.full((256, 2), 0.5))
    base = sde.simulate(model, mu, fam, grid, QUIET, n_paths=200, seed=20, x0=1.0)
    msq = []
    for n in (4, 16, 64):
        v = chattering(mu, n)
        ens = sde.simulate(model, v, fam, grid, QUIET, n_paths=200, seed=20, x0=1.0)
        msq.append(float(sde.sup_distance(base, ens).mean_square[0]))
    assert msq[0] > msq[1] > msq[2]


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_state_aborts_with_step_info():
    grid = TimeGrid(T=1.0, n_steps=8)
    fam = _family(1.0, 1.0, grid)
    model = md.build_model("bilinear", {"th0": 1e160, "th1": 0.0, "s1": 0.0, "gl": 1.0})
    u = constant_strict(ACTIONS, 8, 0)
    with pytest.raises(FloatingPointError, match="step"):
        sde.simulate(model, u, fam, grid, QUIET, n_paths=2, seed=21, x0=1.0)


def test_explicit_noise_and_jump_reuse():
    # the low-level entry points accept pre-sampled randomness
    grid = TimeGrid(T=1.0, n_steps=16)
    fam = _family(1.0, 4.0, grid)
    model = md.build_model("linear_jump_lq", {})
    u = constant_strict(ACTIONS, 16, 1)
    noise = sample_brownian(fam, grid, 30, seed=22)
    paths = sample_poisson(MARKS, grid, 30, seed=22)
    e1 = sde.simulate_strict(model, u, fam, grid, MARKS, noise, paths, x0=1.0)
    e2 = sde.simulate(model, u, fam, grid, MARKS, n_paths=30, seed=22, x0=1.0)
    assert e1.states.tobytes() == e2.states.tobytes()

    mu = embed_strict(u)
    tagged = sample_relaxed_poisson(mu, MARKS, grid, 30, seed=22)
    e3 = sde.simulate_relaxed(model, mu, fam, grid, MARKS, noise, tagged, x0=1.0)
    assert e3.states.tobytes() == e1.states.tobytes()
