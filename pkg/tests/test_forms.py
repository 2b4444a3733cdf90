import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbmcontrol.forms import (buoyancy, form_a, form_a1, form_b1, form_c, form_c1, trace_identity_residual,
                              x0_violation)
from rbmcontrol.grid import BoxGrid, ScalarField, VelocityField, h1_seminorm
from rbmcontrol.params import NondimParams
from rbmcontrol.verification import manufactured_trace_pair, potential_velocity, random_scalar, random_velocity
from rbmcontrol.verification import trace_identity_study

seeds = st.integers(0, 2 ** 32 - 1)


def _vel(g, f):
    return VelocityField.from_function(g, f)


def _sc(g, f):
    return ScalarField.from_function(g, f)


# The free top has no wall nodes, so the vertical shear of (z, 0, 0) is
# missed in the top half cell: a = 1 - h/2.
@pytest.mark.parametrize("n,expected", [(8, 0.9375), (16, 0.96875), (32, 0.984375)])
def test_shear_energy_approaches_volume(n, expected):
    g = BoxGrid(n, n, n)
    u = _vel(g, lambda x, y, z: (z, 0 * z, 0 * z))
    assert form_a(u, u) == pytest.approx(expected, rel=1e-12)


@given(seed=seeds)
def test_a_symmetric_and_matches_seminorm(seed):
    g = BoxGrid(4, 5, 4)
    rng = np.random.default_rng(seed)
    u, v = random_velocity(g, rng), random_velocity(g, rng)
    assert form_a(u, v) == pytest.approx(form_a(v, u), rel=1e-12, abs=1e-12)
    assert form_a(u, u) == pytest.approx(h1_seminorm(u) ** 2, rel=1e-12)
    assert form_a(VelocityField.zeros(g), v) == 0.0


def test_a_rejects_mixed_grids():
    with pytest.raises(ValueError):
        form_a(VelocityField.zeros(BoxGrid(4, 4, 4)), VelocityField.zeros(BoxGrid(5, 4, 4)))


@pytest.mark.parametrize("skew", [False, True])
def test_advection_of_linear_profile(skew):
    g = BoxGrid(8, 8, 8)
    u = _vel(g, lambda x, y, z: (1.0 + 0 * x, 0 * x, 0 * x))
    v = _vel(g, lambda x, y, z: (x, 0 * x, 0 * x))
    value = form_c(u, v, u, skew=skew)
    if not skew:
        assert value == pytest.approx(g.volume, rel=1e-12)
    else:
        # c_sk(u, v, u) = (c(u, v, u) - c(u, u, v)) / 2 and c(u, u, v) = 0 for constant u
        assert value == pytest.approx(0.5 * g.volume, rel=1e-12)


def test_advection_by_zero_field():
    g = BoxGrid(4, 4, 4)
    rng = np.random.default_rng(1)
    v, z = random_velocity(g, rng), random_velocity(g, rng)
    assert form_c(VelocityField.zeros(g), v, z) == 0.0
    assert form_c(VelocityField.zeros(g), v, z, skew=False) == 0.0


@given(seed=seeds)
def test_skew_advection_vanishes_on_diagonal(seed):
    g = BoxGrid(4, 5, 6)
    rng = np.random.default_rng(seed)
    u, v = random_velocity(g, rng), random_velocity(g, rng)
    scale = np.linalg.norm(u.to_vector()) * np.linalg.norm(v.to_vector()) ** 2
    assert abs(form_c(u, v, v)) <= 1e-12 * scale


@given(seed=seeds)
def test_skew_scalar_advection_vanishes_on_diagonal(seed):
    g = BoxGrid(5, 4, 4)
    rng = np.random.default_rng(seed)
    u, s = random_velocity(g, rng), random_scalar(g, rng)
    scale = np.linalg.norm(u.to_vector()) * np.linalg.norm(s.to_vector()) ** 2
    assert abs(form_c1(u, s, s)) <= 1e-12 * scale


@given(seed=seeds)
def test_advection_is_trilinear(seed):
    g = BoxGrid(4, 4, 4)
    rng = np.random.default_rng(seed)
    u, v, z, w = (random_velocity(g, rng) for _ in range(4))
    vw = VelocityField.from_vector(g, 2.0 * v.to_vector() - w.to_vector())
    lhs = form_c(u, vw, z)
    rhs = 2.0 * form_c(u, v, z) - form_c(u, w, z)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_scalar_advection_of_linear_profile():
    g = BoxGrid(8, 8, 8)
    u = _vel(g, lambda x, y, z: (1.0 + 0 * x, 0 * x, 0 * x))
    s = _sc(g, lambda x, y, z: x)
    one = _sc(g, lambda x, y, z: 1.0 + 0 * x)
    assert form_c1(u, s, one, skew=False) == pytest.approx(g.volume, rel=1e-12)
    assert form_c1(u, one, s, skew=False) == 0.0


def test_scalar_advection_of_constant_vanishes():
    g = BoxGrid(4, 4, 4)
    rng = np.random.default_rng(2)
    u, w = random_velocity(g, rng), random_scalar(g, rng)
    assert abs(form_c1(u, _sc(g, lambda x, y, z: 2.0 + 0 * x), w, skew=False)) < 1e-12


def test_a1_examples():
    g = BoxGrid(6, 6, 6)
    z = _sc(g, lambda x, y, zz: zz)
    assert form_a1(z, z) == pytest.approx(1.0, rel=1e-12)
    c = _sc(g, lambda x, y, zz: 5.0 + 0 * x)
    assert abs(form_a1(c, z)) < 1e-12


@given(seed=seeds)
def test_a1_symmetric_semidefinite(seed):
    g = BoxGrid(4, 4, 5)
    rng = np.random.default_rng(seed)
    s, w = random_scalar(g, rng), random_scalar(g, rng)
    assert form_a1(s, w) == pytest.approx(form_a1(w, s), rel=1e-12, abs=1e-12)
    assert form_a1(s, s) > 0


# (z, 0, 0) has a nonzero vertical difference at every interior x-face
# layer; the top half cell is dropped, giving 1 - h.
@pytest.mark.parametrize("n,expected", [(8, 0.875), (16, 0.9375), (32, 0.96875)])
def test_b1_example(n, expected):
    g = BoxGrid(n, n, n)
    s = _sc(g, lambda x, y, z: x)
    v = _vel(g, lambda x, y, z: (z, 0 * z, 0 * z))
    assert form_b1(s, v) == pytest.approx(expected, rel=1e-12)


def test_b1_zero_cases():
    g = BoxGrid(5, 5, 5)
    rng = np.random.default_rng(3)
    s = random_scalar(g, rng)
    assert abs(form_b1(s, _vel(g, lambda x, y, z: (1.0, -2.0, 0.5)))) < 1e-12
    assert abs(form_b1(_sc(g, lambda x, y, z: 3.0 + 0 * x), random_velocity(g, rng))) < 1e-12


def test_buoyancy_examples():
    g = BoxGrid(6, 5, 4, l=2.0)
    p = NondimParams(Pr=3.0, R=2.0, b=-1.5, M=0.0, B=1.0)
    zero = ScalarField.zeros(g)
    v3 = _vel(g, lambda x, y, z: (0 * x, 0 * x, 1.0 + 0 * x))
    assert buoyancy(zero, v3, p) == pytest.approx(p.Pr * p.b * g.volume, rel=1e-12)
    rng = np.random.default_rng(4)
    theta = random_scalar(g, rng)
    horiz = _vel(g, lambda x, y, z: (x, y * z, 0 * x))
    assert buoyancy(theta, horiz, p) == 0.0
    assert buoyancy(theta, random_velocity(g, rng), p.replace(R=0.0, b=0.0)) == 0.0


def test_buoyancy_ignores_horizontal_components():
    g = BoxGrid(4, 4, 4)
    p = NondimParams(Pr=1.0, R=1.0, b=-1.0, M=0.0, B=1.0)
    rng = np.random.default_rng(5)
    theta, v = random_scalar(g, rng), random_velocity(g, rng)
    w = VelocityField(g, np.zeros_like(v.u1), np.zeros_like(v.u2), v.u3)
    assert buoyancy(theta, v, p) == pytest.approx(buoyancy(theta, w, p), rel=1e-13)


def _bump(l, L):
    return lambda x, y: 16.0 * (x * (l - x) * y * (L - y)) ** 2 / (l * L) ** 4


def test_trace_identity_trivial_cases():
    g = BoxGrid(6, 6, 6)
    v = potential_velocity(g, _bump(1.0, 1.0), lambda z: z ** 2 * (1 - z))
    assert x0_violation(v) < 1e-12
    assert trace_identity_residual(_sc(g, lambda x, y, z: 2.0 + 0 * x), v) < 1e-12
    s, _ = manufactured_trace_pair(g)
    assert trace_identity_residual(s, VelocityField.zeros(g)) == 0.0


def test_trace_identity_rejects_field_outside_x0():
    g = BoxGrid(6, 6, 6)
    s = _sc(g, lambda x, y, z: x ** 2 * z)
    # vanishes on the walls but is not divergence-free
    v = _vel(g, lambda x, y, z: (z * (1 - z) * x * (1 - x) * y * (1 - y), 0 * x, 0 * x))
    with pytest.raises(ValueError, match="X_0"):
        trace_identity_residual(s, v)


def test_trace_identity_second_order():
    res, ratios = trace_identity_study((8, 16, 32))
    assert all(r > 0 for r in res)
    assert ratios == pytest.approx([3.57, 3.80], abs=0.02)
