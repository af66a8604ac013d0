import math

import numpy as np
import pytest

from paramsos.config import load_fixture
from paramsos.equilibrium import newton_equilibrium
from paramsos.microgrid import (
    DisturbanceSpec,
    EquilibriumDomain,
    ZeroNominalChannel,
    build_parametric_system,
    default_design_space,
    design_region,
    disturbance_box,
    equilibrium_constraint,
    power_polynomials,
    trig_injections,
)
from paramsos.polyring import VarId, VarSpace
from paramsos.system import box_bounds


@pytest.fixture(scope="module")
def model():
    return build_parametric_system(load_fixture().network, alpha=0.05)


def _one_line_space():
    return VarSpace([VarId("v", "state"), VarId("d1", "disturbance"), VarId("d2", "disturbance")])


def test_single_line_active_power_zero_at_zero_angle():
    sp = _one_line_space()
    v, d1, d2 = sp.vars_of(["v", "d1", "d2"])
    B = 5.0
    P, Q = power_polynomials(sp, v, [(d1, d2)], [(0.0, B)])
    assert P.evaluate({"v": 1.0, "d1": 1.0, "d2": 0.0}) == 0.0
    assert Q.evaluate({"v": 1.0, "d1": 1.0, "d2": 0.0}) == -B


def test_recast_identity():
    sp = _one_line_space()
    v, d1, d2 = sp.vars_of(["v", "d1", "d2"])
    rng = np.random.default_rng(7)
    for _ in range(1000):
        vi, vk = rng.uniform(0.8, 1.2, 2)
        ti, tk = rng.uniform(-0.5, 0.5, 2)
        G, B = rng.uniform(-10, 10, 2)
        P, Q = power_polynomials(sp, v, [(d1, d2)], [(G, B)])
        pt = {"v": vi, "d1": vk * math.cos(ti - tk), "d2": vk * math.sin(ti - tk)}
        Pt, Qt = trig_injections(vi, ti, [(vk, tk, G, B)])
        scale = abs(vi * vk) * (abs(G) + abs(B))
        assert abs(P.evaluate(pt) - Pt) <= 1e-12 * scale
        assert abs(Q.evaluate(pt) - Qt) <= 1e-12 * scale


def test_disturbance_box_examples():
    sp = VarSpace([VarId("d", "disturbance")])
    d = sp.var("d")
    S = disturbance_box(DisturbanceSpec(0.1, {"d": 1.0}), sp)
    assert S.inequalities[0].allclose(d - 0.9, 1e-15)
    assert S.inequalities[1].allclose(1.1 - d, 1e-15)
    S0 = disturbance_box(DisturbanceSpec(0.0, {"d": 1.0}), sp)
    assert len(S0.inequalities) == 2
    assert box_bounds(S0, ["d"]) == (pytest.approx([1.0]), pytest.approx([1.0]))
    lo, hi = box_bounds(disturbance_box(DisturbanceSpec(0.2, {"d": -0.5}), sp), ["d"])
    assert lo[0] == pytest.approx(-0.6) and hi[0] == pytest.approx(-0.4)


def test_zero_nominal_channel_needs_absolute_bound():
    sp = VarSpace([VarId("d", "disturbance")])
    with pytest.raises(ZeroNominalChannel):
        disturbance_box(DisturbanceSpec(0.1, {"d": 0.0}), sp)
    S = disturbance_box(DisturbanceSpec(0.1, {"d": 0.0}, {"d": 0.05}), sp)
    assert box_bounds(S, ["d"])[1][0] == pytest.approx(0.05)


def test_design_region_examples():
    ds = default_design_space(1)
    sp = VarSpace([VarId("lp1", "design"), VarId("lq1", "design")])
    assert ds.is_empty(0.0)
    R = design_region(ds, 1.0, sp)
    assert R.contains({"lp1": 1.0, "lq1": 0.2})
    assert not R.contains({"lp1": 1.0, "lq1": 0.21})
    assert not R.contains({"lp1": 1.01, "lq1": 0.1})
    rng = np.random.default_rng(0)
    lo, hi = ds.box(0.5)
    for lam in rng.uniform(lo, hi, size=(200, 2)):
        assert ds.contains(lam, 0.5) and ds.contains(lam, 1.0)


def test_equilibrium_constraint_examples():
    dom = EquilibriumDomain(1.0)
    assert equilibrium_constraint(dom, 0.0, 1.02, 1.02) == pytest.approx(1.0)
    assert equilibrium_constraint(dom, dom.omega_max, 1.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    small = EquilibriumDomain(0.5)
    rng = np.random.default_rng(1)
    for w, v in zip(rng.uniform(-6, 6, 500), rng.uniform(0.7, 1.3, 500)):
        if equilibrium_constraint(small, w, v, 1.0) >= 0:
            assert equilibrium_constraint(dom, w, v, 1.0) >= 0
    assert dom.radius == 1.0


def test_fixture_nominal_origin_is_equilibrium(model):
    sys = model.system
    rng = np.random.default_rng(2)
    lo, hi = model.design_space.box(1.0)
    lam = rng.uniform(lo, hi, size=(20, len(lo)))
    F = sys.rhs(np.zeros((20, sys.n)), lam, np.zeros((20, len(sys.disturbances))))
    assert np.max(np.abs(F)) <= 1e-12


def test_fixture_newton_residual(model):
    sys = model.system
    rng = np.random.default_rng(3)
    lo, hi = model.design_space.box(0.5)
    d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances)
    lam = rng.uniform(lo, hi, size=(50, len(lo)))
    d = rng.uniform(d_lo, d_hi, size=(50, len(d_lo)))
    x, ok = newton_equilibrium(sys, lam, d)
    assert ok.all()
    assert np.max(np.abs(sys.rhs(x, lam, d))) <= 1e-9


def test_fixture_layout(model):
    assert len(model.inverters) == 3
    assert model.system.states == ["w1", "u1", "w2", "u2", "w3", "u3"]
    assert model.system.design == ["lp1", "lq1", "lp2", "lq2", "lp3", "lq3"]
    # inverter blocks share no state or design variable
    assert model.system.split(model.design_space) == model.blocks()


def test_unscale_round_trip(model):
    x = np.array([0.5, -1.0, 0.0, 0.0, 1.0, 1.0])
    phys = model.unscale(x)
    assert phys[0] == pytest.approx(0.5 * 2 * math.pi * 0.7)
    assert phys[1] == pytest.approx(model.inverters[0].v_d - 0.2)


def test_coupled_channels_add_equalities():
    m = build_parametric_system(load_fixture().network, alpha=0.05, couple_channels=True)
    assert len(m.system.disturbance_set.equalities) == sum(len(b.channels) for b in m.inverters)
