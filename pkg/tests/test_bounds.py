import numpy as np
import pytest

from paramsos.bounds import bounds_report, directions, largest_state_ball
from paramsos.polyring import VarId, VarSpace
from paramsos.sos import SemialgebraicSet
from paramsos.system import ParametricSystem


def decay():
    sp = VarSpace([VarId("x", "state"), VarId("lam", "design")])
    x = sp.var("x")
    return ParametricSystem(sp, ["x"], ["lam"], [], [-x], SemialgebraicSet(sp, [1 - x * x], []),
                            SemialgebraicSet.whole_space(sp)), x


def test_scalar_zero_delta():
    sys, x = decay()
    rep = bounds_report(x * x, sys, [[1.0]], 0.0)
    assert rep.Gamma == pytest.approx(1.0, abs=1e-6)
    assert rep.Gamma_Psi == pytest.approx(1.0, abs=1e-5)
    assert rep.zeta_star == 0.0 and rep.nu_star == pytest.approx(0.0, abs=1e-6)
    assert rep.guaranteed


def test_scalar_large_delta_not_sufficient():
    sys, x = decay()
    rep = bounds_report(x * x, sys, [[1.0]], 0.8)
    # zeta* = 0.8^2, nu* = 0.8, so Delta < Gamma - nu* fails
    assert rep.zeta_star == pytest.approx(0.64, rel=1e-9)
    assert rep.nu_star == pytest.approx(0.8, abs=1e-6)
    assert not rep.sufficiency["delta_below_gamma_minus_nu"]
    assert not rep.guaranteed


def test_text_lists_every_flag():
    sys, x = decay()
    text = bounds_report(x * x, sys, [[1.0]], 0.0).to_text("b.")
    assert text.count("b.sufficiency.") == 3 and "b.T = " in text


def test_directions_unit_and_deterministic():
    d = directions(3, 50, seed=2)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    assert np.array_equal(d, directions(3, 50, seed=2))


def test_largest_ball_of_box():
    sp = VarSpace([VarId("a", "state"), VarId("b", "state")])
    a, b = sp.vars_of(["a", "b"])
    X = SemialgebraicSet(sp, [1 - a * a, 4 - b * b], [])
    assert largest_state_ball(X, ["a", "b"]) == pytest.approx(1.0, abs=1e-3)
