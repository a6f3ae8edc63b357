import dataclasses

import numpy as np
import pytest

from gcontrol import adjoint as adj
from gcontrol import models as md
from gcontrol.adjoint import (
    AdjointTriple,
    bsde_residual,
    bsde_stability_report,
    driver_lipschitz_audit,
    f_term,
    hamiltonian,
    mp_check_near,
    mp_check_relaxed,
    mp_check_strict,
    mp_report_csv,
    solve_adjoint,
    stability_csv,
)
from gcontrol.controls import (
    ActionGrid,
    RelaxedControl,
    chattering,
    constant_strict,
    embed_strict,
    uniform_relaxed,
)
from gcontrol.costs import evaluate_cost, value_bruteforce
from gcontrol.jumps import MarkSpace
from gcontrol.scenarios import TimeGrid, VolatilityBounds, build_scenario_family
from gcontrol.sde import simulate
from gcontrol.variational import solve_fundamental

MARKS = MarkSpace(marks=np.array([-0.4, 0.6]), intensities=np.array([0.7, 0.3]))
QUIET = MarkSpace(marks=np.array([1.0]), intensities=np.array([0.0]))
PM1 = ActionGrid(np.array([-1.0, 1.0]))


def _fam(lo, hi, grid):
    return build_scenario_family(VolatilityBounds(lo, hi), grid, "corners", blocks=1)


def _lq(**over):
    params = dict(b1=0.3, b2=0.6, s0=0.4, s1=0.2, c1=0.2, c2=0.0,
                  f1=0.15, f2=0.0, h1=0.4, h2=0.0, gq=0.6)
    params.update(over)
    return md.build_model("linear_jump_lq", params)


def _gamma_control_model():
    # volatility loading driven purely by the action, jump kick tiny
    return _lq(b1=0.0, b2=0.0, s1=0.0, c1=0.0, c2=0.5, f1=0.0, f2=0.025,
               h1=0.0, gq=0.5)


def _deterministic_linear(theta=0.5):
    # dx = theta x dt with terminal cost x^2 / 2, so the costate has a
    # closed form along the (single, noiseless) trajectory
    return _lq(b1=theta, b2=0.0, s0=0.0, s1=0.0, c1=0.0, f1=0.0, h1=0.0, gq=0.5)


# ---------------------------------------------------------------------------
# Hamiltonian and volatility-channel term
# ---------------------------------------------------------------------------


def test_hamiltonian_literal_sum():
    base = md.build_model("zero", {})
    model = dataclasses.replace(
        base,
        h=lambda t, x, a: 1.0 + 0.0 * x,
        b=lambda t, x, a: 3.0 + 0.0 * x,
        f=lambda t, x, th, a: 2.0 + 0.0 * x,
    )
    marks = MarkSpace(marks=np.array([0.3]), intensities=np.array([0.5]))
    val = hamiltonian(model, marks, 0.0, 0.0, 0.7, 2.0, 0.0, np.array([1.0]))
    # 1 + 2*3 + 0 + 1*2*0.5
    assert float(val) == 8.0


def test_hamiltonian_zero_for_trivial_model():
    model = md.build_model("zero", {})
    x = np.linspace(-2.0, 2.0, 7)
    r = np.ones((7, 2))
    val = hamiltonian(model, MARKS, 0.3, x, 1.0, 5.0 + x, 2.0 - x, r)
    assert val.shape == x.shape
    assert np.all(val == 0.0)


def test_f_term_vanishes_without_impulse():
    grid = TimeGrid(T=1.0, n_steps=8)
    model = _gamma_control_model()
    ens = simulate(model, constant_strict(PM1, 8, 0), _fam(1.0, 1.0, grid),
                   grid, MARKS, 5, 2, 0.5)
    shape = (1, 5)
    zeros = np.zeros(shape)
    ones3 = np.ones((1, 5, 9))
    out = f_term(ens, 2, zeros, zeros, np.ones(shape), np.ones((1, 5, 8)),
                 np.ones((1, 5, 8)), ones3, ones3, np.full((1, 8), 0.7))
    assert out.shape == shape
    assert np.all(out == 0.0)


def test_f_term_single_scenario_cancellation():
    """With one constant scenario the second-order tail nets to zero.

    The generator maximum sits at the lone scenario, so S * a - 2 G is
    exactly zero there and only the instantaneous gamma coupling can
    contribute.
    """
    grid = TimeGrid(T=1.0, n_steps=8)
    model = _gamma_control_model()
    ens = simulate(model, constant_strict(PM1, 8, 0), _fam(1.0, 1.0, grid),
                   grid, MARKS, 5, 2, 0.5)
    shape = (1, 5)
    ones3 = np.ones((1, 5, 9))
    s_tab = np.full((1, 8), 0.7)
    # nonzero impulse, zero gamma response, zero diffusion loading
    out = f_term(ens, 2, np.ones(shape), np.zeros(shape), np.ones(shape),
                 np.zeros((1, 5, 8)), np.ones((1, 5, 8)), ones3, ones3, s_tab)
    assert np.all(out == 0.0)
    # gamma response alone reproduces the instantaneous term p * dgamma * a
    out2 = f_term(ens, 2, np.zeros(shape), np.full(shape, 0.25), np.full(shape, 2.0),
                  np.zeros((1, 5, 8)), np.ones((1, 5, 8)), ones3, ones3, s_tab)
    assert np.allclose(out2, 0.5)


# ---------------------------------------------------------------------------
# solve_adjoint
# ---------------------------------------------------------------------------


def test_constant_gradient_adjoint_is_exact():
    grid = TimeGrid(T=1.0, n_steps=12)
    model = md.build_model("zero", {})
    ens = simulate(model, constant_strict(PM1, 12, 1), _fam(1.0, 4.0, grid),
                   grid, MARKS, 30, 4, 0.7)
    triple, rep = solve_adjoint(ens)
    assert np.all(triple.p == 1.0)
    assert np.all(triple.q == 0.0)
    assert np.all(triple.r == 0.0)
    assert np.all(triple.k == 0.0)
    assert np.all(rep.y_residual == 0.0)
    assert np.max(bsde_residual(ens, triple)) <= 1e-12


def test_terminal_costate_matches_gradient_bitwise():
    grid = TimeGrid(T=1.0, n_steps=16)
    model = _lq()
    ens = simulate(model, constant_strict(PM1, 16, 1), _fam(1.0, 4.0, grid),
                   grid, MARKS, 40, 7, 1.0)
    triple, _ = solve_adjoint(ens)
    assert np.array_equal(triple.p[:, :, -1], model.g_x(ens.states[:, :, -1]))


def test_costate_tracks_linear_flow_closed_form():
    """dx = theta x dt, g = x^2/2: p_t = x_T exp(theta (T - t)) exactly."""
    theta = 0.5
    grid = TimeGrid(T=1.0, n_steps=1000)
    model = _deterministic_linear(theta)
    ens = simulate(model, constant_strict(PM1, 1000, 0), _fam(1.0, 1.0, grid),
                   grid, QUIET, 3, 3, 1.0)
    triple, _ = solve_adjoint(ens)
    x_T = ens.states[0, 0, -1]
    expected = x_T * np.exp(theta * (grid.T - grid.times))
    rel = np.abs(triple.p[0, 0, :] - expected) / np.abs(expected)
    assert rel.max() < 2e-2


def test_representation_reconstructs_terminal_functional():
    grid = TimeGrid(T=1.0, n_steps=16)
    model = _lq()
    ens = simulate(model, constant_strict(PM1, 16, 1), _fam(1.0, 4.0, grid),
                   grid, MARKS, 40, 7, 1.0)
    _, rep = solve_adjoint(ens)
    pair = solve_fundamental(ens)
    x = ens.states
    manual = model.g_x(x[:, :, -1]) * pair.phi[:, :, -1]
    for k in range(16):
        tk = float(grid.times[k])
        manual = manual + model.h_x(tk, x[:, :, k], 1.0) * pair.phi[:, :, k] * grid.dt
    assert np.max(np.abs(manual - rep.X)) < 1e-10
    assert rep.basis_degree == 2
    assert np.all(np.isfinite(rep.cond_y))
    assert np.all(np.isfinite(rep.cond_increment))


def test_residual_detects_costate_perturbation():
    # noiseless linear flow: shifting p by one adds (theta dt)^2 per step
    theta = 0.5
    grid = TimeGrid(T=1.0, n_steps=20)
    model = _deterministic_linear(theta)
    ens = simulate(model, constant_strict(PM1, 20, 0), _fam(1.0, 1.0, grid),
                   grid, QUIET, 4, 3, 1.0)
    triple, _ = solve_adjoint(ens)
    base = bsde_residual(ens, triple)
    shifted = AdjointTriple(p=triple.p + 1.0, q=triple.q, r=triple.r, k=triple.k)
    pert = bsde_residual(ens, shifted)
    bound = (theta * grid.dt) ** 2
    assert np.all(pert - base >= 0.999 * bound)


def test_richer_basis_tightens_state_fit():
    grid = TimeGrid(T=1.0, n_steps=48)
    model = _lq()
    mu = uniform_relaxed(PM1, 48)
    for seed in (5, 9, 13):
        ens = simulate(model, mu, _fam(1.0, 4.0, grid), grid, MARKS, 1500, seed, 1.0)
        _, rep1 = solve_adjoint(ens, basis_degree=1)
        _, rep2 = solve_adjoint(ens, basis_degree=2)
        assert np.all(rep2.y_residual < rep1.y_residual)


def test_triple_shape_and_flag_validation():
    p = np.zeros((1, 2, 4))
    q = np.zeros((1, 2, 3))
    r = np.zeros((1, 2, 3, 1))
    k = np.zeros((1, 2, 3))
    AdjointTriple(p=p, q=q, r=r, k=k)
    with pytest.raises(ValueError):
        AdjointTriple(p=p, q=q, r=r, k=k + 0.5)
    with pytest.raises(ValueError):
        AdjointTriple(p=np.full((1, 2, 4), np.nan), q=q, r=r, k=k)
    with pytest.raises(ValueError):
        AdjointTriple(p=p, q=np.zeros((1, 2, 4)), r=r, k=k)


# ---------------------------------------------------------------------------
# stationarity tables
# ---------------------------------------------------------------------------


def test_single_action_table_is_vacuous():
    grid = TimeGrid(T=1.0, n_steps=32)
    solo = ActionGrid(np.array([0.7]))
    rep = mp_check_strict(_lq(), constant_strict(solo, 32, 0), _fam(1.0, 4.0, grid),
                          grid, MARKS, 60, 11, 1.0, n_blocks=4)
    assert rep.verdict
    assert len(rep.entries) == 4
    for e in rep.entries:
        assert e.estimate == 0.0 and e.stderr == 0.0 and e.passed


def test_optimum_passes_stationarity_table():
    grid = TimeGrid(T=1.0, n_steps=64)
    model = _gamma_control_model()
    marks = MarkSpace(marks=np.array([-0.5, 0.6]), intensities=np.array([0.8, 0.4]))
    fam = _fam(1.0, 4.0, grid)
    search = value_bruteforce(
        model,
        [constant_strict(PM1, 64, 0), constant_strict(PM1, 64, 1)],
        fam, grid, marks, 400, 21, 2.5,
    )
    assert search.minimizer_index == 0
    rep = mp_check_strict(model, constant_strict(PM1, 64, 0), fam, grid, marks,
                          1500, 21, 2.5, n_blocks=2)
    assert rep.verdict
    assert rep.hypothesis == "b = 0 and h = 0: stationarity guarantee applies"
    assert rep.summary()["verdict"] == "pass"
    for e in rep.entries:
        if e.action == -1.0:
            # the control's own atom contributes an exactly zero entry
            assert e.estimate == 0.0 and e.stderr == 0.0
        else:
            assert 1.5 < e.estimate < 2.5
            assert 0.0 < e.stderr < 0.05


def test_suboptimal_control_flagged_with_witness():
    grid = TimeGrid(T=1.0, n_steps=64)
    model = _gamma_control_model()
    marks = MarkSpace(marks=np.array([-0.5, 0.6]), intensities=np.array([0.8, 0.4]))
    rep = mp_check_strict(model, constant_strict(PM1, 64, 1), _fam(1.0, 4.0, grid),
                          grid, marks, 1500, 21, 2.5, n_blocks=2)
    assert not rep.verdict
    out = rep.summary()
    assert out["verdict"] == "fail"
    assert out["worst_action"] == -1.0
    assert out["worst_entry"] < -2.5
    for e in rep.entries:
        if e.action == -1.0:
            assert not e.passed and e.estimate < -2.5


def test_embedding_reproduces_strict_table_bitwise():
    grid = TimeGrid(T=1.0, n_steps=48)
    model = _lq(c2=0.3, f2=0.05, h2=0.1)
    fam = _fam(1.0, 4.0, grid)
    u = constant_strict(PM1, 48, 1)

    ens_u = simulate(model, u, fam, grid, MARKS, 400, 9, 1.0)
    ens_e = simulate(model, embed_strict(u), fam, grid, MARKS, 400, 9, 1.0)
    tri_u, _ = solve_adjoint(ens_u)
    tri_e, _ = solve_adjoint(ens_e)
    assert np.array_equal(tri_u.p, tri_e.p)
    assert np.array_equal(tri_u.q, tri_e.q)
    assert np.array_equal(tri_u.r, tri_e.r)

    rep_u = mp_check_strict(model, u, fam, grid, MARKS, 400, 9, 1.0, n_blocks=4)
    rep_e = mp_check_relaxed(model, embed_strict(u), fam, grid, MARKS, 400, 9, 1.0,
                             n_blocks=4)
    assert rep_u.entries == rep_e.entries
    assert rep_u.verdict == rep_e.verdict


def test_near_check_zero_epsilon_matches_strict():
    grid = TimeGrid(T=1.0, n_steps=64)
    model = _gamma_control_model()
    marks = MarkSpace(marks=np.array([-0.5, 0.6]), intensities=np.array([0.8, 0.4]))
    fam = _fam(1.0, 4.0, grid)
    u = constant_strict(PM1, 64, 0)
    strict = mp_check_strict(model, u, fam, grid, marks, 400, 21, 2.5, n_blocks=2)
    near = mp_check_near(model, u, [], 5.0, fam, grid, marks, 400, 21, 2.5,
                         epsilon_n=0.0, n_blocks=2, add_block_spikes=False)
    assert near.mp.entries == strict.entries
    assert near.mp.extra_slack == 0.0
    assert near.C_min == 0.0
    assert near.n_candidates == 0


def test_near_check_allowance_rescues_chattering():
    """A coarse chattering approximation fails the strict table but passes
    once the allowance proportional to its improvement rate is granted."""
    grid = TimeGrid(T=1.0, n_steps=256)
    model = _lq(b1=0.0, b2=0.0, s0=0.5, s1=0.0, c1=0.0, c2=0.8,
                f1=0.0, h1=0.6, gq=0.3)
    marks = MarkSpace(marks=np.array([-0.4, 0.6]), intensities=np.array([0.3, 0.2]))
    fam = _fam(1.0, 1.0, grid)
    u4 = chattering(uniform_relaxed(PM1, 256), 4)
    eps = 0.096

    bare = mp_check_near(model, u4, [], 0.0, fam, grid, marks, 2000, 44, 0.0,
                         epsilon_n=eps, n_blocks=4, add_block_spikes=False)
    assert not bare.mp.verdict
    failing = [e for e in bare.mp.entries if not e.passed]
    assert len(failing) == 2
    assert all(e.action == 1.0 for e in failing)
    assert 0.1 < bare.C_min < 1.0
    assert bare.jepsilon_ok

    rescued = mp_check_near(model, u4, [], 1.05 * bare.C_min, fam, grid, marks,
                            2000, 44, 0.0, epsilon_n=eps, n_blocks=4,
                            add_block_spikes=False)
    assert rescued.mp.verdict
    assert rescued.mp.extra_slack == pytest.approx(1.05 * bare.C_min * eps)


def test_near_check_measures_improvement_rate():
    grid = TimeGrid(T=1.0, n_steps=32)
    model = _gamma_control_model()
    marks = MarkSpace(marks=np.array([-0.5, 0.6]), intensities=np.array([0.8, 0.4]))
    fam = _fam(1.0, 4.0, grid)
    rep = mp_check_near(model, constant_strict(PM1, 32, 1),
                        [constant_strict(PM1, 32, 0)], 1.0, fam, grid, marks,
                        400, 21, 2.5, n_blocks=4)
    # one explicit candidate plus a one-step spike per block
    assert rep.n_candidates == 5
    assert rep.epsilon_n > 0.0
    assert rep.jepsilon_ok
    assert rep.mp.extra_slack == pytest.approx(rep.epsilon_n)


def test_mixture_beats_atoms_and_passes():
    grid = TimeGrid(T=1.0, n_steps=64)
    model = _lq(b1=0.0, b2=0.0, s0=0.5, s1=0.0, c1=0.0, c2=0.8,
                f1=0.0, h1=0.0, gq=1.0)
    marks = MarkSpace(marks=np.array([-0.4, 0.6]), intensities=np.array([0.3, 0.2]))
    fam = _fam(1.0, 1.0, grid)
    mu = uniform_relaxed(PM1, 64)

    j_mu = evaluate_cost(model, mu, fam, grid, marks, 1500, 33, 0.0)
    j_lo = evaluate_cost(model, constant_strict(PM1, 64, 0), fam, grid, marks,
                         1500, 33, 0.0)
    j_hi = evaluate_cost(model, constant_strict(PM1, 64, 1), fam, grid, marks,
                         1500, 33, 0.0)
    margin = 3 * (j_mu.scenario_stderrs.max() + j_lo.scenario_stderrs.max())
    assert j_mu.upper_value < min(j_lo.upper_value, j_hi.upper_value) - margin

    # over the 5-point simplex ladder the even mixture is the minimizer
    ladder = [RelaxedControl(grid=PM1, weights=np.tile([1.0 - w, w], (64, 1)))
              for w in (0.0, 0.25, 0.5, 0.75, 1.0)]
    search = value_bruteforce(model, ladder, fam, grid, marks, 1200, 33, 0.0)
    assert search.minimizer_index == 2

    rep = mp_check_relaxed(model, mu, fam, grid, marks, 1500, 33, 0.0, n_blocks=2)
    assert rep.verdict

    dirac = mp_check_relaxed(model, embed_strict(constant_strict(PM1, 64, 1)),
                             fam, grid, marks, 1500, 33, 0.0, n_blocks=2)
    assert not dirac.verdict
    assert dirac.summary()["worst_entry"] < -2.0


# ---------------------------------------------------------------------------
# stability ladder and driver audit
# ---------------------------------------------------------------------------


def test_stability_gaps_vanish_for_embedded_dirac():
    grid = TimeGrid(T=1.0, n_steps=32)
    model = _gamma_control_model()
    mu = embed_strict(constant_strict(PM1, 32, 0))
    rep = bsde_stability_report(model, mu, _fam(1.0, 4.0, grid), grid, MARKS,
                                [1, 2, 4], 200, 17, 2.5)
    for row in rep.rows:
        assert row.p_gap == 0.0 and row.q_gap == 0.0 and row.r_gap == 0.0
        assert row.k_gap == 0.0
    assert rep.p_nonincreasing and rep.q_nonincreasing and rep.r_nonincreasing


def test_stability_gaps_shrink_along_ladder():
    grid = TimeGrid(T=1.0, n_steps=256)
    model = _lq(b1=0.15, b2=0.4, s0=0.3, s1=0.1, c1=0.1, c2=0.2, f1=0.2,
                h1=0.3, h2=0.2, gq=0.5)
    mu = uniform_relaxed(PM1, 256)
    rep = bsde_stability_report(model, mu, _fam(1.0, 2.25, grid), grid, MARKS,
                                [4, 16, 64], 500, 55, 1.0)
    assert rep.p_nonincreasing and rep.q_nonincreasing and rep.r_nonincreasing
    assert [row.n for row in rep.rows] == [4, 16, 64]
    assert rep.rows[0].p_gap > rep.rows[-1].p_gap
    assert all(row.k_gap == 0.0 for row in rep.rows)


def test_lipschitz_audit_within_declared_bound():
    grid = TimeGrid(T=1.0, n_steps=16)
    audit = driver_lipschitz_audit(_lq(), _fam(1.0, 4.0, grid), grid, MARKS,
                                   n_probes=400, seed=5)
    assert audit.ok
    assert audit.n_probes == 400
    assert audit.c0 > 0.0
    assert 0.0 < audit.worst_ratio <= audit.c0 * (1 + 1e-9)


def test_lipschitz_audit_trivial_model():
    grid = TimeGrid(T=1.0, n_steps=16)
    audit = driver_lipschitz_audit(md.build_model("zero", {}), _fam(1.0, 4.0, grid),
                                   grid, MARKS, n_probes=50, seed=5)
    assert audit.c0 == 0.0
    assert audit.worst_ratio == 0.0
    assert audit.ok


# ---------------------------------------------------------------------------
# serialization and argument checks
# ---------------------------------------------------------------------------


def test_mp_csv_layout():
    grid = TimeGrid(T=1.0, n_steps=32)
    model = _gamma_control_model()
    rep = mp_check_strict(model, constant_strict(PM1, 32, 0), _fam(1.0, 4.0, grid),
                          grid, MARKS, 60, 11, 2.5, n_blocks=2)
    lines = mp_report_csv(rep).splitlines()
    assert lines[0] == "block,action,estimate,stderr,slack,verdict"
    assert len(lines) == 1 + 4
    for line in lines[1:]:
        cells = line.split(",")
        assert len(cells) == 6
        assert cells[5] in ("pass", "fail")
        float(cells[2])  # estimates round-trip through repr


def test_stability_csv_layout():
    grid = TimeGrid(T=1.0, n_steps=32)
    model = _gamma_control_model()
    mu = embed_strict(constant_strict(PM1, 32, 0))
    rep = bsde_stability_report(model, mu, _fam(1.0, 4.0, grid), grid, MARKS,
                                [1, 2], 50, 17, 2.5)
    lines = stability_csv(rep).splitlines()
    assert lines[0] == "n,p_gap,p_stderr,q_gap,q_stderr,r_gap,r_stderr,k_gap"
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "1"
    assert lines[1].split(",")[-1] == "0.0"


def test_argument_validation():
    grid = TimeGrid(T=1.0, n_steps=32)
    model = _gamma_control_model()
    fam = _fam(1.0, 4.0, grid)
    u = constant_strict(PM1, 32, 0)
    with pytest.raises(ValueError, match="n_blocks"):
        mp_check_strict(model, u, fam, grid, MARKS, 20, 1, 2.5, n_blocks=7)
    with pytest.raises(ValueError, match="nonnegative"):
        mp_check_near(model, u, [], -1.0, fam, grid, MARKS, 20, 1, 2.5)
    with pytest.raises(ValueError, match="epsilon_n"):
        mp_check_near(model, u, [], 1.0, fam, grid, MARKS, 20, 1, 2.5,
                      epsilon_n=-0.1, add_block_spikes=False)
    with pytest.raises(ValueError, match="n_list"):
        bsde_stability_report(model, embed_strict(u), fam, grid, MARKS,
                              [4, 4], 20, 1, 2.5)
    with pytest.raises(ValueError, match="n_probes"):
        driver_lipschitz_audit(model, fam, grid, MARKS, n_probes=0)
