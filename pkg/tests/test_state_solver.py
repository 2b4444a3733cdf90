import math

import numpy as np
import pytest
from conftest import smooth_controls
from hypothesis import given
from hypothesis import strategies as st

from rbmcontrol.controls import ControlTriple
from rbmcontrol.grid import (BoundaryField, BoxGrid, ScalarField, VelocityField, control_partition, divergence,
                             h12_norm, region)
from rbmcontrol.params import NondimParams
from rbmcontrol.state_solver import (Discretization, Lifts, SolverOptions, StateSolution, basic_state,
                                     basic_state_controls, basic_state_pressure, compute_lifts, data_norm_sum,
                                     lift_temperature, lift_velocity, picard_solve, solve_linearized,
                                     uniqueness_gap, weak_residual, zero_controls)

CONDUCTION = NondimParams(Pr=1.0, R=0.5, b=-1.0, M=0.5, B=1.0)


# -- conduction state ----------------------------------------------------------

def test_conduction_temperature_profile():
    st_ = basic_state(NondimParams(Pr=1, R=0, b=-1, M=0, B=1), BoxGrid(4, 4, 4))
    assert np.allclose(st_.theta.top, 0.5)
    assert np.allclose(st_.theta.bottom, 1.0)
    z = BoxGrid(4, 4, 4).cell_centers()[2]
    assert np.allclose(st_.theta.cells, 1.0 - z / 2)
    assert st_.u.max_abs() == 0.0


def test_cold_bottom_conduction_state():
    p = NondimParams(Pr=1, R=2, b=-1, M=0, B=1, theta_c_nd=0.0)
    assert basic_state_pressure(p) == (-1.0, 0.0)
    assert not np.any(basic_state(p, BoxGrid(4, 4, 4)).theta.cells)


def test_conduction_pressure_coefficients():
    p1, p2 = basic_state_pressure(NondimParams(Pr=1, R=2, b=-1, M=0, B=1))
    assert p1 == 1.0 and p2 == -0.5


def test_conduction_pressure_balances_buoyancy():
    p = NondimParams(Pr=1, R=2, b=-1, M=0, B=1)
    g = BoxGrid(4, 4, 8)
    st_ = basic_state(p, g)
    dpdz = np.diff(st_.p.cells, axis=2) / g.hz
    theta_face = 0.5 * (st_.theta.cells[:, :, 1:] + st_.theta.cells[:, :, :-1])
    assert np.allclose(dpdz, p.b + p.R * theta_face, atol=1e-12)


# -- lifts -------------------------------------------------------------------

def test_zero_velocity_data_lifts_to_zero():
    g = BoxGrid(5, 5, 5)
    c = zero_controls(g)
    assert lift_velocity(c.g, None, CONDUCTION).max_abs() == 0.0


def test_tangential_lift_is_divergence_free_with_exact_trace():
    g = BoxGrid(6, 6, 6)
    c = zero_controls(g)
    reg = c.g.region
    x = reg.centroid
    vals = np.zeros((reg.size, 3))
    on_x0 = np.array([w == "x0" for w in reg.wall_names()])
    vals[on_x0, 1] = np.sin(np.pi * x[on_x0, 1]) * np.sin(np.pi * x[on_x0, 2])
    gf = BoundaryField(reg, vals, normal_zero=True)
    u = lift_velocity(gf, None, CONDUCTION)
    assert np.abs(divergence(u)).max() < 1e-10
    disc = Discretization.for_controls(c)
    Ubc = disc.velocity_data(vals)
    assert np.array_equal(u.to_vector()[disc.uc], Ubc[disc.uc])


def test_lift_rejects_net_flux():
    g = BoxGrid(5, 5, 5)
    g0 = region(g, "gamma0")
    whole, _ = control_partition(g, np.ones(g0.size, dtype=bool))
    vals = np.zeros((whole.size, 3))
    vals[np.array([w == "bottom" for w in whole.wall_names()]), 2] = 1.0
    with pytest.raises(ValueError, match="flux"):
        lift_velocity(BoundaryField(whole, vals), None, CONDUCTION)


def test_temperature_lift_reproduces_conduction_profile():
    g = BoxGrid(6, 6, 6)
    c = basic_state_controls(CONDUCTION, g)
    theta = lift_temperature(c.phi1, c.phi2, CONDUCTION)
    assert np.abs(theta.cells - basic_state(CONDUCTION, g).theta.cells).max() < 1e-12


def test_zero_temperature_data_lifts_to_zero():
    g = BoxGrid(5, 5, 5)
    c = zero_controls(g)
    assert not np.any(lift_temperature(c.phi1, c.phi2, CONDUCTION).to_vector())


@pytest.mark.parametrize("flux", [0.3, -1.2])
def test_temperature_lift_conserves_heat(flux):
    g = BoxGrid(6, 6, 6)
    c = zero_controls(g)
    phi1 = c.phi1.copy(np.full(c.phi1.region.size, flux))
    theta = lift_temperature(phi1, c.phi2, CONDUCTION)
    area = g.hx * g.hy
    top = -CONDUCTION.B * np.sum(theta.top) * area
    lateral = flux * phi1.region.measure
    # outward normal derivative on the bottom, from the half-cell difference
    bottom = -np.sum(theta.cells[:, :, 0] - theta.bottom) / (0.5 * g.hz) * area
    assert abs(top + lateral + bottom) < 1e-10 * abs(lateral)
    assert abs(bottom) > 0.1 * abs(lateral)


# -- linearized step -----------------------------------------------------------

def test_linearized_step_with_zero_data_is_zero():
    g = BoxGrid(5, 5, 5)
    p = NondimParams(Pr=1, R=1, b=0, M=1, B=1)
    c = zero_controls(g)
    lifts = Lifts(VelocityField.zeros(g), ScalarField.zeros(g))
    u, th = solve_linearized(VelocityField.zeros(g), lifts, c, p)
    assert u.max_abs() == 0.0 and not np.any(th.to_vector())


def test_linearized_step_from_conduction_data():
    g = BoxGrid(6, 6, 6)
    p = NondimParams(Pr=2, R=0, b=-1, M=0, B=1)
    c = basic_state_controls(p, g)
    lifts = compute_lifts(c, None, p)
    u, th = solve_linearized(VelocityField.zeros(g), lifts, c, p)
    assert u.max_abs() < 1e-12
    assert np.abs(th.to_vector()).max() < 1e-12


def test_linearized_energy_bound():
    g = BoxGrid(6, 6, 6)
    p = NondimParams(Pr=3, R=1, b=-1, M=0.5, B=1)
    c = smooth_controls(p, g)
    lifts = compute_lifts(c, None, p)
    ubar = lift_velocity(c.g, None, p)
    u_hat, _ = solve_linearized(ubar, lifts, c, p)
    from rbmcontrol.forms import form_a
    assert u_hat.max_abs() > 0
    energy = p.Pr * form_a(u_hat, u_hat)
    disc = Discretization.for_controls(c)
    x = u_hat.to_vector()
    # the right side applied to u_hat: the Oseen operator is coercive with constant Pr
    W = ubar.to_vector() + lifts.u_eps.to_vector()
    K = p.Pr * disc.A + disc.Csk.matrix_u(W)
    assert energy <= abs(x @ (K @ x)) * (1 + 1e-10)


# -- fixed-point solve ---------------------------------------------------------

@pytest.mark.parametrize("p", [CONDUCTION, NondimParams(Pr=5, R=1, b=-2, M=0.1, B=2.0),
                               NondimParams(Pr=1, R=0, b=0, M=1, B=0.5)])
def test_conduction_data_reproduce_conduction_state(p):
    g = BoxGrid(8, 8, 8)
    state, rep = picard_solve(basic_state_controls(p, g), None, p)
    assert rep.converged and rep.picard_iters <= 2
    assert state.u.max_abs() <= 1e-8
    assert np.abs(state.theta.cells - basic_state(p, g).theta.cells).max() < 1e-10
    assert np.abs(state.p.cells - basic_state(p, g).p.cells).max() < 1e-8


def test_zero_problem_gives_zero_state_in_one_step():
    g = BoxGrid(5, 5, 5)
    p = NondimParams(Pr=1, R=0, b=0, M=0, B=1)
    state, rep = picard_solve(zero_controls(g), None, p)
    assert rep.converged and rep.picard_iters == 1
    assert state.u.max_abs() == 0.0 and not np.any(state.theta.to_vector())


def test_small_data_iteration_contracts():
    g = BoxGrid(8, 8, 8)
    p = NondimParams(Pr=10, R=1, b=-1, M=0.1, B=1)
    c = smooth_controls(p, g, amplitude=0.5)
    state, rep = picard_solve(c, None, p, SolverOptions(newton=False))
    h = rep.residual_history
    assert rep.converged and len(h) >= 3
    assert all(b < a for a, b in zip(h[1:], h[2:]))
    # contraction estimate of the fixed-point map
    K = max(b / a for a, b in zip(h[1:], h[2:]))
    assert K < 0.5


def test_solution_satisfies_constraints():
    g = BoxGrid(8, 8, 8)
    p = NondimParams(Pr=10, R=1, b=-1, M=0.5, B=1)
    c = smooth_controls(p, g)
    state, rep = picard_solve(c, None, p)
    assert rep.converged
    assert np.abs(divergence(state.u)).max() < 1e-9
    disc = Discretization.for_controls(c)
    Ubc = disc.velocity_data(c.g.values)
    assert np.array_equal(state.u.to_vector()[disc.uc], Ubc[disc.uc])
    assert np.array_equal(state.theta.bottom.ravel(), c.phi2.values)
    assert np.all(state.u.u3[:, :, -1] == 0.0)
    assert max(weak_residual(state, c, p)) <= 1e-8
    assert rep.apriori_lhs > 0 and rep.apriori_rhs == pytest.approx(data_norm_sum(c))


def test_newton_polish_agrees_with_plain_fixed_point():
    g = BoxGrid(6, 6, 6)
    p = NondimParams(Pr=10, R=1, b=-1, M=0.5, B=1)
    c = smooth_controls(p, g)
    a, ra = picard_solve(c, None, p, SolverOptions(tol=1e-12))
    b, rb = picard_solve(c, None, p, SolverOptions(newton=False, tol=1e-12, max_iters=200))
    assert ra.converged and rb.converged
    assert np.abs(a.u.to_vector() - b.u.to_vector()).max() < 1e-9
    assert np.abs(a.theta.to_vector() - b.theta.to_vector()).max() < 1e-9


def test_warm_start_reuses_factorization():
    g = BoxGrid(6, 6, 6)
    p = NondimParams(Pr=10, R=1, b=-1, M=0.5, B=1)
    c = smooth_controls(p, g)
    state, _ = picard_solve(c, None, p)
    before = state.cache.factorizations
    c2 = c.with_values(phi2=c.phi2.values * 1.001)
    s2, r2 = picard_solve(c2, None, p, initial=state)
    cold, _ = picard_solve(c2, None, p)
    assert r2.converged
    assert s2.cache.factorizations - before <= 1
    assert np.abs(s2.theta.to_vector() - cold.theta.to_vector()).max() < 1e-9


def test_non_convergence_is_reported_not_raised():
    g = BoxGrid(8, 8, 8)
    p = NondimParams(Pr=1, R=10, b=-1, M=1e5, B=1)
    c = smooth_controls(p, g)
    state, rep = picard_solve(c, None, p, SolverOptions(max_iters=20))
    assert not rep.converged and rep.message
    assert len(rep.residual_history) == 20
    assert all(math.isfinite(r) for r in rep.residual_history)
    assert isinstance(state, StateSolution)


def test_report_serializes():
    g = BoxGrid(5, 5, 5)
    _, rep = picard_solve(basic_state_controls(CONDUCTION, g), None, CONDUCTION)
    js = rep.to_json()
    assert js["converged"] is True and js["picard_iters"] == rep.picard_iters
    assert len(js["weak_residual"]) == 2


@pytest.mark.parametrize("kw", [dict(tol=0.0), dict(max_iters=0), dict(damping=0.0)])
def test_solver_options_validated(kw):
    with pytest.raises(ValueError):
        SolverOptions(**kw)


def test_u0_must_sit_on_the_complement():
    g = BoxGrid(5, 5, 5)
    c = zero_controls(g)
    with pytest.raises(ValueError):
        picard_solve(c, BoundaryField.zeros(region(g, "lateral"), vector=True), CONDUCTION)


def test_u0_on_bottom_drives_flow():
    g = BoxGrid(6, 6, 6)
    c = basic_state_controls(CONDUCTION, g)
    bottom = region(g, "bottom")
    vals = np.zeros((bottom.size, 3))
    x = bottom.centroid
    vals[:, 0] = 0.2 * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    u0 = BoundaryField(bottom, vals)
    state, rep = picard_solve(c, u0, CONDUCTION)
    assert rep.converged and state.u.max_abs() > 1e-3
    assert max(weak_residual(state, c, CONDUCTION, u0)) <= 1e-8


# -- manufactured temperature (second-order check beyond the linear profile) ----

def _manufactured(p):
    k = np.pi
    bb = -(k * np.sinh(k) + p.B * np.cosh(k)) / (k * np.cosh(k) + p.B * np.sinh(k))
    return lambda x, y, z: 1 - p.B * z / (1 + p.B) + 0.5 * np.cos(k * x) * (np.cosh(k * z) + bb * np.sinh(k * z))


def test_temperature_converges_at_second_order():
    p = NondimParams(Pr=1, R=0, b=-1, M=0, B=1)
    exact = _manufactured(p)
    errs = []
    for n in (8, 16, 32):
        g = BoxGrid(n, n, n)
        c = basic_state_controls(p, g)
        x = c.phi2.region.centroid
        c = c.with_values(phi2=exact(x[:, 0], x[:, 1], 0 * x[:, 0]))
        state, rep = picard_solve(c, None, p)
        assert rep.converged and rep.picard_iters == 1
        errs.append(np.abs(state.theta.cells - exact(*g.cell_centers())).max())
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert errs[0] == pytest.approx(6.47e-3, rel=0.01)
    assert all(3.0 <= r <= 5.0 for r in ratios)


# -- residual and uniqueness diagnostics ----------------------------------------

def test_weak_residual_examples():
    g = BoxGrid(6, 6, 6)
    c = basic_state_controls(CONDUCTION, g)
    exact = basic_state(CONDUCTION, g)
    r0 = weak_residual(exact, c, CONDUCTION)
    assert max(r0) <= 1e-8
    bumped = StateSolution(exact.u, exact.p, ScalarField(g, exact.theta.cells * 1.01, exact.theta.top,
                                                         exact.theta.bottom))
    assert max(weak_residual(bumped, c, CONDUCTION)) > max(r0)
    zero = StateSolution(VelocityField.zeros(g), ScalarField.zeros(g), ScalarField.zeros(g))
    assert weak_residual(zero, c, CONDUCTION)[1] > 1e-3


def test_uniqueness_gap_examples():
    g = BoxGrid(5, 5, 5)
    p = NondimParams(Pr=2.5, R=0.3, b=-1, M=0.2, B=1)
    assert uniqueness_gap(p, zero_controls(g), None, 1.0) == 2.5
    c = basic_state_controls(p.replace(R=0.01, M=0.01, B=0.1), g)
    assert uniqueness_gap(p.replace(R=0.01, M=0.01, B=0.1), c, None, 0.5) > 0
    c = smooth_controls(p, g)
    sub1 = p.Pr - uniqueness_gap(p, c, None, 0.1)
    sub2 = p.Pr - uniqueness_gap(p, c.scaled(2.0), None, 0.1)
    assert sub2 == pytest.approx(2 * sub1, rel=1e-12)
    with pytest.raises(ValueError):
        uniqueness_gap(p, c, None, 0.0)


def test_uniqueness_gap_hand_formula():
    g = BoxGrid(4, 4, 4)
    p = NondimParams(Pr=3.0, R=0.5, b=-1, M=0.25, B=1)
    c = basic_state_controls(p, g)  # g = 0, phi1 = 0, phi2 = 1 on the unit bottom
    expected = 3.0 - 0.2 * (3.0 * 0.75 + 1.0) * 1.0
    assert uniqueness_gap(p, c, None, 0.2) == pytest.approx(expected, rel=1e-13)


@given(scale=st.floats(0.1, 10))
def test_data_norm_is_homogeneous(scale):
    g = BoxGrid(4, 4, 4)
    c = smooth_controls(NondimParams(Pr=1, R=0, b=0, M=0, B=1), g)
    assert data_norm_sum(c.scaled(scale)) == pytest.approx(scale * data_norm_sum(c), rel=1e-12)
    assert data_norm_sum(c) == pytest.approx(sum(h12_norm(f) for f in c.fields))


def test_jacobian_matches_residual_differences():
    g = BoxGrid(4, 4, 4)
    p = NondimParams(Pr=2, R=1, b=-1, M=0.7, B=1)
    c = smooth_controls(p, g)
    disc = Discretization.for_controls(c)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(disc.nX)
    Ubc = disc.velocity_data(c.g.values)
    Tbc = disc.temperature_data(c.phi2.values)
    J = disc.jacobian(x, p)
    d = np.zeros(disc.nX)
    d[disc.xf] = rng.standard_normal(disc.xf.size)
    eps = 1e-6
    fd = (disc.residual(x + eps * d, Ubc, Tbc, c.phi1.values, p)
          - disc.residual(x - eps * d, Ubc, Tbc, c.phi1.values, p)) / (2 * eps)
    jd = J @ d
    assert np.abs((fd - jd)[disc.xf]).max() < 1e-7 * np.abs(jd).max()


def test_control_triple_keeps_sets():
    g = BoxGrid(4, 4, 4)
    from rbmcontrol.controls import ConstraintSet
    box = ConstraintSet(-1, 1)
    c = basic_state_controls(CONDUCTION, g, sets=(box, box, box))
    assert isinstance(c, ControlTriple) and c.with_values().sets == (box, box, box)
