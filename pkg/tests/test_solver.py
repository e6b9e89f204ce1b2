import math

import numpy as np
import pytest

from conftest import discretization
from hybridns.mms import ManufacturedSolution
from hybridns.solver import (SchemeConfig, StepFailure, TimeStepper, automatic_steps,
                             check_divergence_free, initial_state, run_transient, with_overrides)
from hybridns.verify import jacobian_order, potential_gradient, stream_function_fields

EXACT = ManufacturedSolution()


def zero(p):
    return np.zeros((len(p), 2))


def test_automatic_step_count():
    assert automatic_steps(math.sqrt(2) / 8, 1) == 10
    assert automatic_steps(1 / 4, 1) == 10
    assert automatic_steps(1 / 32, 1) == 32
    assert automatic_steps(math.sqrt(2) / 32, 2) == 108
    cfg = SchemeConfig(k=1)
    assert cfg.steps_for(math.sqrt(2) / 8) == 10
    assert SchemeConfig(k=1, n_steps=3).steps_for(0.1) == 3


@pytest.mark.parametrize("kw", [dict(k=3), dict(nu=-1.0), dict(cs=0.0), dict(t_final=0.0),
                                dict(time_scheme="leapfrog"), dict(beta_update="never"),
                                dict(linear_solver="cg"), dict(n_steps=0), dict(newton_tol=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SchemeConfig(**kw)


def test_rest_state_stays_at_rest(k):
    disc = discretization(k, 4)
    cfg = SchemeConfig(k=k, nu=1.0, n_steps=3)
    traj = run_transient(cfg, disc, zero, keep_states=True)
    for s in traj.states:
        assert not s.velocity.any()
        assert np.abs(s.pressure).max() < 1e-14
    # one iteration per solve; startup steps are two solves
    its = [d["newton_iterations"] for d in traj.diagnostics[1:]]
    assert its == [2] * cfg.startup_steps + [1] * (3 - cfg.startup_steps)


def test_gradient_forcing_from_rest_gives_no_velocity(k):
    disc = discretization(k, 4)
    cfg = SchemeConfig(k=k, nu=1e-3, n_steps=10)
    traj = run_transient(cfg, disc, zero, forcing=potential_gradient, keep_states=True)
    assert max(math.sqrt(disc.l2_norm_sq(s.velocity)) for s in traj.states) < 1e-10
    # the pressure absorbs the gradient
    assert np.linalg.norm(traj.final.pressure) > 1e-2


def test_jacobian_matches_finite_differences(k, rng):
    disc = discretization(k, 3)
    for beta_update in ("newton", "iterate"):
        cfg = SchemeConfig(k=k, nu=1e-2, beta_update=beta_update)
        orders, errs = jacobian_order(disc, cfg, rng)
        assert orders.min() > 1.9, (beta_update, orders, errs)


def test_stokes_converges_in_one_iteration():
    disc = discretization(1, 4)
    cfg = SchemeConfig(k=1, nu=1.0, convection=False, n_steps=4)
    traj = run_transient(cfg, disc, EXACT.initial_velocity, EXACT.forcing_field(1.0))
    its = [d["newton_iterations"] for d in traj.diagnostics[1:]]
    # startup steps are two half steps, one iteration each
    assert its == [2, 2, 1, 1]


def test_newton_iteration_count():
    disc = discretization(1, 8)
    cfg = SchemeConfig(k=1, nu=1.0)
    traj = run_transient(cfg, disc, EXACT.initial_velocity, EXACT.forcing_field(1.0))
    for d in traj.diagnostics[1 + cfg.startup_steps:]:
        assert d["newton_iterations"] <= 5


def test_constraint_independent_of_newton_tolerance():
    disc = discretization(1, 4)
    for tol in (1e-2, 1e-8):
        cfg = SchemeConfig(k=1, nu=1e-2, newton_tol=tol, n_steps=4)
        traj = run_transient(cfg, disc, EXACT.initial_velocity, EXACT.forcing_field(1e-2))
        for d in traj.diagnostics[1:]:
            assert d["max_divergence"] < 1e-12
            assert abs(d["pressure_mean"]) < 1e-12


@pytest.mark.parametrize("nu", [1.0, 1e-6])
def test_energy_decays_without_forcing(k, nu):
    disc = discretization(k, 4)
    cfg = SchemeConfig(k=k, nu=nu, n_steps=20, t_final=0.5)
    traj = run_transient(cfg, disc, stream_function_fields()[1])
    energy = [d["energy"] for d in traj.diagnostics]
    for a, b in zip(energy, energy[1:]):
        assert b <= a * (1 + 10 * cfg.newton_tol)


def test_every_step_divergence_free(k):
    disc = discretization(k, 4)
    cfg = SchemeConfig(k=k, nu=1e-3, n_steps=5)
    traj = run_transient(cfg, disc, EXACT.initial_velocity, EXACT.forcing_field(1e-3))
    assert all(d["divergence_free"] for d in traj.diagnostics[1:])


def test_divergence_check_detects_violations(rng):
    disc = discretization(1, 4)
    rep = check_divergence_free(disc, np.zeros(disc.dofmap.n_u))
    assert (rep.max_divergence, rep.max_normal_jump, rep.max_boundary_normal) == (0.0, 0.0, 0.0)
    assert rep.passed()
    u = rng.standard_normal(disc.dofmap.n_u)
    u[disc.dofmap.velocity_fixed] = 0.0
    assert not check_divergence_free(disc, u).passed()


def test_saddle_point_structure(rng):
    disc = discretization(1, 3)
    cfg = SchemeConfig(k=1, nu=1.0, convection=False)
    stepper = TimeStepper(disc, cfg, None)
    old = initial_state(disc, zero, cfg.cs)
    x = disc.join(old.velocity, np.zeros(disc.dofmap.n_p))
    mat = stepper.assemble_residual_jacobian(x, old, 0.1).matrix.toarray()
    nf, npr = disc.n_free, disc.dofmap.n_p
    up = mat[:nf, nf:nf + npr]
    pu = mat[nf:nf + npr, :nf]
    np.testing.assert_allclose(up, -pu.T, atol=1e-14)
    # without convection the velocity block is symmetric
    uu = mat[:nf, :nf]
    np.testing.assert_allclose(uu, uu.T, atol=1e-12 * np.abs(uu).max())
    assert not mat[nf:nf + npr, nf:nf + npr].any()


def test_condensed_matches_direct(k):
    disc = discretization(k, 3)
    runs = []
    for solver in ("condensed", "direct"):
        cfg = SchemeConfig(k=k, nu=1e-2, n_steps=3, linear_solver=solver, newton_tol=1e-12)
        runs.append(run_transient(cfg, disc, EXACT.initial_velocity,
                                  EXACT.forcing_field(1e-2)).final)
    a, b = runs
    assert np.abs(a.velocity - b.velocity).max() < 1e-9 * np.abs(a.velocity).max()
    assert np.abs(a.pressure - b.pressure).max() < 1e-8 * np.abs(a.pressure).max()
    assert abs(disc.mean_weights @ a.pressure) < 1e-11


@pytest.mark.parametrize("option", [dict(time_scheme="midpoint"), dict(beta_update="step"),
                                    dict(beta_update="iterate"), dict(startup_steps=0),
                                    dict(stabilization="dofi")])
def test_scheme_variants_run(option):
    stab = option.get("stabilization", "hho")
    disc = discretization(1, 4, stabilization=stab)
    cfg = SchemeConfig(k=1, nu=1e-2, n_steps=4, **option)
    traj = run_transient(cfg, disc, EXACT.initial_velocity, EXACT.forcing_field(1e-2))
    assert all(d["divergence_free"] for d in traj.diagnostics[1:])
    assert np.isfinite(traj.final.velocity).all()


def test_step_failure_keeps_partial_trajectory():
    disc = discretization(1, 4)
    cfg = SchemeConfig(k=1, nu=1e-2, n_steps=4, newton_max_iter=1, newton_tol=1e-14,
                       newton_abs_floor=1e-300)
    with pytest.raises(StepFailure) as info:
        run_transient(cfg, disc, EXACT.initial_velocity, EXACT.forcing_field(1e-2))
    traj = info.value.trajectory
    assert len(traj.diagnostics) >= 1
    assert traj.diagnostics[0]["step"] == 0


def test_mismatched_degree_rejected():
    with pytest.raises(ValueError):
        TimeStepper(discretization(1, 2), SchemeConfig(k=2), None)


def test_with_overrides():
    cfg = with_overrides(SchemeConfig(), nu=0.5)
    assert cfg.nu == 0.5 and cfg.k == 1
