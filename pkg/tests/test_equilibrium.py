import math

import numpy as np
import pytest
from scipy.optimize import brentq

from paramsos.config import load_fixture
from paramsos.equilibrium import (
    NewtonDivergence,
    UnvalidatedEquilibriumMap,
    newton_equilibrium,
    newton_powerflow,
    taylor_equilibrium,
    validate_equilibrium_map,
)
from paramsos.network import Bus, Inverter, NetworkSpec
from paramsos.polyring import VarId, VarSpace
from paramsos.sos import SemialgebraicSet
from paramsos.system import DesignSpace, NominalConditionViolated, ParametricSystem


def scalar_system(rhs_builder):
    sp = VarSpace([VarId("x", "state"), VarId("lam", "design"), VarId("d", "disturbance")])
    x, lam, d = sp.vars_of(["x", "lam", "d"])
    X = SemialgebraicSet(sp, [4 - x * x], [])
    D = SemialgebraicSet(sp, [d + 0.5, 0.5 - d], [])
    return ParametricSystem(sp, ["x"], ["lam"], ["d"], [rhs_builder(x, lam, d)], X, D), sp


def test_flat_network_converges_immediately():
    net = NetworkSpec.from_impedances([Bus("a"), Bus("b")], [("a", "b", 0.01, 0.1)],
                                      [Inverter("a"), Inverter("b")])
    pf = newton_powerflow(net)
    assert pf.iterations == 1
    assert np.allclose(pf.v, 1.0) and np.allclose(pf.theta, 0.0)


def test_single_line_against_scalar_oracle():
    # lossless line x = 0.2 (G = 0, |B| = 5) feeding a constant-power load
    xl, PL, QL = 0.2, 0.8, 0.3
    net = NetworkSpec.from_impedances([Bus("s"), Bus("l", load_p=PL, load_q=QL)], [("s", "l", 0.0, xl)],
                                      [Inverter("s")])
    pf = newton_powerflow(net)
    # eliminating the angle: (PL x)^2 + (v^2 + QL x)^2 = v^2, high-voltage root
    g = lambda v: (PL * xl) ** 2 + (v * v + QL * xl) ** 2 - v * v  # noqa: E731
    v_ref = brentq(g, 0.75, 1.0, xtol=1e-15)
    th_ref = -math.asin(PL * xl / v_ref)
    assert pf.voltage("l") == pytest.approx(v_ref, abs=1e-9)
    assert pf.angle("l") == pytest.approx(th_ref, abs=1e-9)


def test_fixture_residual_recomputed():
    cfg = load_fixture()
    net = cfg.network
    pf = newton_powerflow(net)
    Y = net.admittance()
    V = pf.v * np.exp(1j * pf.theta)
    S = V * np.conj(Y @ V)
    p_spec = np.array([-b.load_p for b in net.buses])
    q_spec = np.array([-b.load_q for b in net.buses])
    for inv in net.inverters:
        p_spec[net.index(inv.bus)] += inv.p_set
    inv_idx = {net.index(i.bus) for i in net.inverters}
    slack = net.index(net.inverters[0].bus)
    for k in range(len(net.buses)):
        if k != slack:
            assert abs(S[k].real - p_spec[k]) <= 1e-10
        if k not in inv_idx:
            assert abs(S[k].imag - q_spec[k]) <= 1e-10
    assert pf.residual <= 1e-10


def test_powerflow_divergence_reported():
    heavy = NetworkSpec.from_impedances([Bus("s"), Bus("l", load_p=20.0)], [("s", "l", 0.0, 0.5)], [Inverter("s")])
    with pytest.raises(NewtonDivergence):
        newton_powerflow(heavy)


def test_taylor_linear_exact():
    sys, sp = scalar_system(lambda x, lam, d: -x + d)
    m = taylor_equilibrium(sys, 1, 1)
    assert m.components[0] == sp.var("d")


def test_taylor_inverse_lambda_first_order():
    sys, sp = scalar_system(lambda x, lam, d: -lam * x + d)
    lc = 1.5
    m = taylor_equilibrium(sys, 1, 1, center={"lam": lc})
    lam, d = sp.var("lam"), sp.var("d")
    # d/lam expanded to first order in (lam - lc): d/lc - d (lam - lc)/lc^2
    expected = d * (1 / lc) - d * (lam - lc) * (1 / lc ** 2)
    assert m.components[0].allclose(expected, 1e-12)


def test_taylor_higher_lambda_order_closer():
    sys, sp = scalar_system(lambda x, lam, d: -lam * x + d)
    z = np.array([[0.0, 1.8, 0.4]])
    exact = 0.4 / 1.8
    errs = [abs(taylor_equilibrium(sys, 1, k, center={"lam": 1.5})(z)[0, 0] - exact) for k in (1, 2, 3)]
    assert errs[0] > errs[1] > errs[2]


def test_taylor_zero_disturbance_gives_zero():
    sys, sp = scalar_system(lambda x, lam, d: -lam * x - x ** 3 + d + d * x)
    m = taylor_equilibrium(sys, 3, 2, center={"lam": 1.0})
    assert m(np.array([[0.0, 1.3, 0.0]]))[0, 0] == 0.0


def test_nominal_condition_enforced():
    sys, sp = scalar_system(lambda x, lam, d: -x + d + 0.1)
    with pytest.raises(NominalConditionViolated):
        taylor_equilibrium(sys)


def test_validation_report_linear_system():
    sys, sp = scalar_system(lambda x, lam, d: -x + d)
    m = taylor_equilibrium(sys)
    ds = DesignSpace(["lam"], [[1.0]], [1.0], [0.5])
    rep = validate_equilibrium_map(m, sys, ds, 1.0, 50, seed=1)
    assert rep.max_discrepancy <= 1e-12 and rep.n_failed == 0


def test_validation_reports_discrepancy_for_nonlinear():
    sys, sp = scalar_system(lambda x, lam, d: -lam * x + d)
    m = taylor_equilibrium(sys, 1, 1, center={"lam": 1.5})
    ds = DesignSpace(["lam"], [[1.0]], [2.0], [1.0])
    rep = validate_equilibrium_map(m, sys, ds, 1.0, 50, seed=1)
    # worst case at lam = 1, |d| = 0.5: 0.5 - 0.5 (1/1.5 + 0.5/2.25)
    assert rep.max_discrepancy == pytest.approx(0.5 - 0.5 * (1 / 1.5 + 0.5 / 2.25), rel=1e-9)


def test_newton_equilibrium_batched():
    sys, sp = scalar_system(lambda x, lam, d: -lam * x + d)
    lam = np.array([[1.0], [2.0], [4.0]])
    d = np.array([[0.5], [-0.5], [0.2]])
    x, ok = newton_equilibrium(sys, lam, d)
    assert ok.all()
    assert x[:, 0] == pytest.approx(d[:, 0] / lam[:, 0], abs=1e-12)


def test_unvalidated_map_refused():
    from paramsos.region import LyapunovTemplate, assemble_program

    sys, sp = scalar_system(lambda x, lam, d: -lam * x + d)
    m = taylor_equilibrium(sys, 1, 1, center={"lam": 1.0})
    ds = DesignSpace(["lam"], [[1.0]], [1.0], [1.0])
    with pytest.raises(UnvalidatedEquilibriumMap):
        assemble_program(sys, m, LyapunovTemplate(), ds, 1.0, 1.0)
