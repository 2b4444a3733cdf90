import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbmcontrol.params import CostWeights, NondimParams, PhysicalParams, nondimensionalize

UNIT = dict(rho0=1.0, mu=1.0, K_cond=1.0, cp=1.0, alpha=1.0, gamma_sigma=1.0, g_mag=1.0, h_exch=1.0,
            d=1.0, l1=1.0, L1=1.0, theta_c=2.0, theta_a=1.0)


def test_unit_material_gives_unit_groups():
    p = nondimensionalize(PhysicalParams(**UNIT))
    assert (p.Pr, p.R, p.b, p.M, p.B, p.l, p.L) == (1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0)


def test_equal_temperatures_switch_off_buoyancy_and_surface_tension():
    p = nondimensionalize(PhysicalParams(**{**UNIT, "theta_c": 1.0}))
    assert p.R == 0.0 and p.M == 0.0
    assert p.b == -1.0


def test_biot_number_from_exchange_coefficient():
    assert nondimensionalize(PhysicalParams(**{**UNIT, "h_exch": 2.0})).B == 2.0


def test_aspect_ratios_scale_with_depth():
    p = nondimensionalize(PhysicalParams(**{**UNIT, "d": 2.0, "l1": 3.0, "L1": 5.0}))
    assert p.l == 1.5 and p.L == 2.5


@pytest.mark.parametrize("field", ["d", "mu", "K_cond", "rho0", "cp", "l1"])
def test_nonpositive_material_rejected(field):
    with pytest.raises(ValueError):
        PhysicalParams(**{**UNIT, field: 0.0})


def test_cooling_from_below_rejected():
    with pytest.raises(ValueError, match="heated from below"):
        PhysicalParams(**{**UNIT, "theta_c": 0.5})


positive = st.floats(min_value=1e-2, max_value=1e2, allow_nan=False)


@given(rho0=positive, mu=positive, K=positive, cp=positive, g=positive, d=positive, dt=st.floats(0, 50))
def test_viscosity_doubling_scales_groups(rho0, mu, K, cp, g, d, dt):
    base = PhysicalParams(**{**UNIT, "rho0": rho0, "mu": mu, "K_cond": K, "cp": cp, "g_mag": g, "d": d,
                             "theta_a": 1.0, "theta_c": 1.0 + dt})
    p1 = nondimensionalize(base)
    p2 = nondimensionalize(dataclasses.replace(base, mu=2 * mu))
    assert p2.Pr == pytest.approx(2 * p1.Pr, rel=1e-14)
    assert p2.R == pytest.approx(p1.R / 2, rel=1e-14, abs=0)
    assert p2.M == pytest.approx(p1.M / 2, rel=1e-14, abs=0)
    assert abs(p2.b) == pytest.approx(abs(p1.b) / 2, rel=1e-14)


@given(rho0=positive, mu=positive, K=positive, h=positive, gs=positive, dt=st.floats(0, 50))
def test_sign_contract(rho0, mu, K, h, gs, dt):
    p = nondimensionalize(PhysicalParams(**{**UNIT, "rho0": rho0, "mu": mu, "K_cond": K, "h_exch": h,
                                            "gamma_sigma": gs, "theta_a": 0.0, "theta_c": dt}))
    assert p.b <= 0 and p.R >= 0 and p.M >= 0 and p.B >= 0


@pytest.mark.parametrize("kw", [dict(Pr=0.0), dict(B=0.0), dict(R=-1.0), dict(M=-0.1), dict(l=0.0)])
def test_nondim_invariants(kw):
    base = dict(Pr=1.0, R=0.0, b=-1.0, M=0.0, B=1.0)
    with pytest.raises(ValueError):
        NondimParams(**{**base, **kw})


def test_nondim_b_sign_is_free():
    assert NondimParams(Pr=1, R=0, b=2.0, M=0, B=1).b == 2.0


def test_replace_revalidates():
    p = NondimParams(Pr=1, R=0, b=-1, M=0, B=1)
    assert p.replace(R=3.0).R == 3.0
    with pytest.raises(ValueError):
        p.replace(Pr=-1.0)


def test_weights_need_a_tracking_term():
    with pytest.raises(ValueError, match="all zero"):
        CostWeights(0, 0, 0, 1, 1, 1).check()


def test_mode_two_needs_positive_regularization():
    with pytest.raises(ValueError, match="mode"):
        CostWeights(1, 0, 0, 1, 0, 1).check()
    assert CostWeights(1, 0, 0, 0, 0, 0, mode="i").check().mode == "i"


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        CostWeights(gamma2=-1.0)


def test_weight_groups():
    w = CostWeights(1, 2, 3, 4, 5, 6)
    assert w.tracking == (1, 2, 3) and w.regularization == (4, 5, 6)
