import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbmcontrol.controls import UNCONSTRAINED, ConstraintSet, ControlTriple, GConstraint, zero_controls
from rbmcontrol.grid import BoundaryField, BoxGrid, h12_gram, h12_norm, region
from rbmcontrol.optimizer import ControlSpace, project, project_values

seeds = st.integers(0, 2 ** 32 - 1)


@pytest.fixture(scope="module")
def grid():
    return BoxGrid(4, 4, 4)


def test_constraint_set_validation():
    with pytest.raises(ValueError, match="lo > hi"):
        ConstraintSet(lo=1.0, hi=0.0)
    with pytest.raises(ValueError, match="radius"):
        ConstraintSet(radius=0.0)
    assert not UNCONSTRAINED.bounded
    assert ConstraintSet(lo=-1, hi=1).bounded and ConstraintSet(radius=2).bounded
    assert not ConstraintSet(lo=0).bounded


def test_zero_controls_layout(grid):
    c = zero_controls(grid, theta_c=1.5)
    assert c.g.region.tag == "gamma01" and c.g.is_vector
    assert c.phi1.region.tag == "lateral" and c.phi2.region.tag == "bottom"
    assert np.all(c.phi2.values == 1.5) and not np.any(c.g.values)


def test_control_triple_rejects_wrong_fields(grid):
    c = zero_controls(grid)
    with pytest.raises(ValueError, match="vector"):
        ControlTriple(c.phi1, c.phi1, c.phi2)
    with pytest.raises(ValueError, match="lateral"):
        ControlTriple(c.g, c.phi2, c.phi2)
    with pytest.raises(ValueError, match="bottom"):
        ControlTriple(c.g, c.phi1, c.phi1)


def test_control_triple_rejects_normal_flow_on_sides(grid):
    c = zero_controls(grid)
    vals = c.g.region.normal.copy()
    with pytest.raises(ValueError, match="constraints"):
        c.with_values(g=vals)


def test_scaled_and_with_values_copy(grid):
    c = zero_controls(grid, theta_c=1.0)
    d = c.scaled(2.0)
    assert np.all(d.phi2.values == 2.0) and np.all(c.phi2.values == 1.0)
    e = c.with_values(phi1=np.ones(c.phi1.region.size))
    assert np.all(e.phi1.values == 1.0) and not np.any(c.phi1.values)


@given(seed=seeds)
def test_gconstraint_projection_is_admissible_and_idempotent(seed):
    grid = BoxGrid(4, 4, 4)
    reg = region(grid, "gamma0")
    con = GConstraint(reg)
    v = con.apply(np.random.default_rng(seed).standard_normal((reg.size, 3)))
    assert BoundaryField(reg, v).constraint_violation() < 1e-10
    assert np.allclose(con.apply(v), v, atol=1e-12)


@given(seed=seeds)
def test_gconstraint_riesz_represents_dual(seed):
    grid = BoxGrid(4, 4, 4)
    reg = region(grid, "gamma0")
    con = GConstraint(reg)
    rng = np.random.default_rng(seed)
    dual = rng.standard_normal((reg.size, 3))
    r = con.riesz(dual)
    w = con.apply(rng.standard_normal((reg.size, 3)))
    assert BoundaryField(reg, r).constraint_violation() < 1e-10
    lhs = np.einsum("ic,ij,jc->", r, con.G, w)
    assert lhs == pytest.approx(np.sum(dual * w), rel=1e-9, abs=1e-12)


def test_interior_point_unchanged(grid):
    bot = region(grid, "bottom")
    cand = BoundaryField(bot, np.full(bot.size, 0.5))
    out = project(ConstraintSet(lo=-1, hi=1), cand)
    assert np.array_equal(out.values, cand.values)


def test_box_clamps(grid):
    bot = region(grid, "bottom")
    out = project(ConstraintSet(lo=-1, hi=1), BoundaryField(bot, np.full(bot.size, 3.0)))
    assert np.all(out.values == 1.0)


def test_ball_scales_radially(grid):
    bot = region(grid, "bottom")
    v = np.random.default_rng(0).standard_normal(bot.size)
    v *= 2.0 / h12_norm(BoundaryField(bot, v))
    out = project(ConstraintSet(radius=1.0), BoundaryField(bot, v))
    assert np.allclose(out.values, 0.5 * v, atol=1e-14)
    assert h12_norm(out) == pytest.approx(1.0)


def test_ball_with_center(grid):
    bot = region(grid, "bottom")
    cs = ConstraintSet(radius=0.1, center=np.ones(bot.size))
    out = project(cs, BoundaryField(bot, np.zeros(bot.size)))
    assert h12_norm(BoundaryField(bot, out.values - 1.0)) == pytest.approx(0.1)


# boxes containing 0 and balls about 0 always intersect the admissible subspace
@given(seed=seeds, lo=st.floats(-2, -0.1), hi=st.floats(0.1, 2), radius=st.floats(0.05, 3))
def test_projection_feasible_and_idempotent(seed, lo, hi, radius):
    grid = BoxGrid(4, 4, 4)
    c = zero_controls(grid)
    space = ControlSpace(c)
    rng = np.random.default_rng(seed)
    for k, f in enumerate(c.fields):
        cs = ConstraintSet(lo=lo, hi=hi, radius=radius)
        v = space.project(k, cs, 3.0 * rng.standard_normal(f.values.shape))
        again = space.project(k, cs, v)
        assert np.allclose(again, v, atol=1e-8)
        assert np.all(v >= lo - 1e-8) and np.all(v <= hi + 1e-8)
        assert space.norm(k, v) <= radius * (1 + 1e-6)
        if k == 0:
            assert BoundaryField(f.region, v).constraint_violation() < 1e-8


def test_projection_without_constraints_is_identity(grid):
    bot = region(grid, "bottom")
    v = np.arange(bot.size, dtype=float)
    assert np.array_equal(project_values(UNCONSTRAINED, v, h12_gram(bot)), v)
