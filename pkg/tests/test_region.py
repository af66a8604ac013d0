import math

import numpy as np
import pytest

from cases import scalar_problem
from paramsos.equilibrium import newton_equilibrium, taylor_equilibrium, validate_equilibrium_map
from paramsos.microgrid import build_parametric_system
from paramsos.polyring import CompiledPolys, VarId, VarSpace
from paramsos.region import (
    EmptyRegion,
    Feasibility,
    LyapunovTemplate,
    RegionProblem,
    assemble_program,
    bisect_beta,
    feasible_at,
    max_solver_calls,
    psi_unknown,
    trace_is_monotone,
)
from paramsos.sdp import Status
from paramsos.sos import DegreeInconsistency, Infeasible, SemialgebraicSet, check_sos
from paramsos.system import DesignSpace, ParametricSystem, box_bounds, sample_box
from paramsos.validate import hurwitz_check


def step_oracle(threshold, calls=None):
    def oracle(b):
        if calls is not None:
            calls.append(b)
        st = Status.FEASIBLE if b <= threshold else Status.INFEASIBLE
        return Feasibility(b, st, residual=0.0)
    return oracle


def test_bisection_on_step():
    calls = []
    r = bisect_beta(step_oracle(0.37, calls), 1.0, 0.01)
    assert 0.36 <= r.beta_star <= 0.38
    assert r.beta_star <= 0.37
    assert not r.cap_reached
    assert len(calls) <= max_solver_calls(1.0, 0.01)
    assert trace_is_monotone(r.trace)


def test_bisection_cap():
    r = bisect_beta(step_oracle(5.0), 1.0, 0.01)
    assert r.beta_star == 1.0 and r.cap_reached and r.status == "cap"
    assert len(r.trace) == 1


def test_bisection_empty():
    with pytest.raises(EmptyRegion) as exc:
        bisect_beta(step_oracle(-1.0), 1.0, 0.01)
    assert len(exc.value.trace) == 2


@pytest.mark.parametrize("threshold", [0.013, 0.25, 0.5, 0.77, 0.991])
def test_bisection_within_tolerance(threshold):
    r = bisect_beta(step_oracle(threshold), 1.0, 0.01)
    assert threshold - 0.01 <= r.beta_star <= threshold


def test_bisection_argument_checks():
    with pytest.raises(ValueError):
        bisect_beta(step_oracle(0.5), 0.0, 0.01)
    with pytest.raises(ValueError):
        bisect_beta(step_oracle(0.5), 1.0, 0.0)


def test_flagged_entries_exempt_from_monotonicity():
    from paramsos.region import TraceEntry

    tr = [TraceEntry(1.0, "Infeasible", math.nan, False), TraceEntry(0.8, "NumericalFailure", math.nan, True),
          TraceEntry(0.5, "Feasible", 0.0, False), TraceEntry(1.1, "Feasible", 0.0, False)]
    assert not trace_is_monotone(tr)
    assert trace_is_monotone(tr[:3])


# -- analytic scalar pipeline ------------------------------------------------------

@pytest.mark.parametrize("lam_min, expected", [(1.0, "cap"), (0.6, "cap"), (0.4, "empty")])
def test_scalar_oracle(lam_min, expected):
    # x0 = d/lam is worst at lam_min, so |x0| <= Delta iff lam_min >= alpha/Delta = 0.5
    prob = scalar_problem(lam_min)
    if expected == "empty":
        with pytest.raises(EmptyRegion):
            bisect_beta(prob, 2.0, 0.01)
    else:
        r = bisect_beta(prob, 2.0, 0.01)
        assert r.beta_star == 2.0 and r.cap_reached
        assert r.certificate.residual <= 1e-7


def test_scalar_no_lambda_decrease_expansion():
    sp = VarSpace([VarId("x", "state")])
    x = sp.var("x")
    sys = ParametricSystem(sp, ["x"], [], [], [-x], SemialgebraicSet(sp, [4 - x * x], []),
                           SemialgebraicSet.whole_space(sp))
    x0 = taylor_equilibrium(sys)
    ds = DesignSpace([], np.zeros((0, 0)), [], [])
    for eps2, ok in [(0.5, True), (1.9, True), (2.5, False)]:
        tpl = LyapunovTemplate(eps2=eps2, decrease_radius=0.0)
        validate_equilibrium_map(x0, sys, ds, 1.0, 5)
        cons, (psi,) = assemble_program(sys, x0, tpl, ds, 1.0, 1.0)
        coeffs = [1.0 if m == ((0, 2),) else 0.0 for m in psi.basis]  # Psi = x^2
        target = cons[1].target.value({psi.name: coeffs})
        assert target.allclose((2 - eps2) * x * x, 1e-12)
        assert isinstance(check_sos(target), Infeasible) != ok


def test_empty_design_region_infeasible():
    prob = scalar_problem(1.0)
    fz = feasible_at(prob, 0.0)
    assert fz.status == Status.INFEASIBLE and "empty" in fz.message


def test_pathological_scaling_flagged():
    sp = VarSpace([VarId("x", "state"), VarId("lam", "design"), VarId("d", "disturbance")])
    x, lam, d = sp.vars_of(["x", "lam", "d"])
    sys = ParametricSystem(sp, ["x"], ["lam"], ["d"], [(-lam * x + d) * 1e9], SemialgebraicSet(sp, [4 - x * x], []),
                           SemialgebraicSet(sp, [d + 0.5, 0.5 - d], []))
    fz = feasible_at(RegionProblem(sys, DesignSpace(["lam"], [[1.0]], [1.0], [1.0]), 1.0), 2.0)
    assert fz.status == Status.NUMERICAL_FAILURE and fz.flagged and not fz.feasible


def test_template_checks():
    with pytest.raises(DegreeInconsistency):
        LyapunovTemplate(state_degree=3)
    with pytest.raises(ValueError):
        LyapunovTemplate(eps1=0.0)


def test_psi_basis_size():
    prob = scalar_problem(1.0)
    u = psi_unknown(prob.system, LyapunovTemplate(state_degree=4, lambda_degree=2))
    # C(1+4, 4) x-monomials times C(1+2, 2) lam-monomials
    assert len(u.basis) == math.comb(5, 4) * math.comb(3, 2)


# -- fixture ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def fixture_problem(fixture_config):
    from paramsos.pipeline import build_cell

    return build_cell(fixture_config, 0.02, 1.0)


def test_fixture_dimensions_stable(fixture_problem):
    model, prob = fixture_problem
    states = prob.blocks[0]
    sub, ds = prob.block(states)
    x0 = prob.equilibrium_map(states, 0.1)
    from paramsos.sos import compile_feasibility

    dims = [compile_feasibility(*assemble_program(sub, x0, prob.template, ds, 0.1, prob.delta)).dimensions()
            for _ in range(2)]
    assert dims[0] == dims[1]
    n_x, n_all = len(sub.states), len(sub.states) + len(sub.design) + len(sub.disturbances)
    # Psi: all x-monomials of degree <= 2
    assert dims[0]["n_free"] >= math.comb(n_x + 2, 2)
    # every Gram block is a full monomial basis C(n + d, d) over some subset of the variables
    sizes = {math.comb(n + d, d) for n in range(1, n_all + 1) for d in range(0, 3)}
    assert all(b in sizes for b in dims[0]["blocks"])


def test_fixture_small_beta_feasible_with_hurwitz_corner(fixture_problem):
    model, prob = fixture_problem
    beta = prob.design.min_beta() * 1.5
    lo, hi = prob.design.box(beta)
    sys = model.system
    ok, a = hurwitz_check(sys, lo[None], np.zeros((1, len(sys.disturbances))))
    assert np.all(ok)
    assert feasible_at(prob, beta).feasible


def test_fixture_beyond_onset_infeasible(fixture_problem):
    from paramsos.pipeline import instability_onset

    model, prob = fixture_problem
    onset = instability_onset(model, beta_max=2.0, n_grid=200)
    assert 0.5 < onset < 1.0
    assert not feasible_at(prob, min(2.0, 1.5 * onset)).feasible


def test_region_monotonicity(fixture_cell):
    """The beta* certificate stays valid on the smaller region Lam(beta*/2)."""
    prob, res = fixture_cell.problem, fixture_cell.result
    beta2 = res.beta_star
    beta1 = 0.5 * beta2
    rng = np.random.default_rng(11)
    for blk in res.certificate.blocks:
        sub, ds = prob.block(blk.states)
        x0 = prob.equilibrium_map(blk.states, beta2)
        cons, _ = assemble_program(sub, x0, prob.template, ds, beta2, prob.delta)
        cert = blk.certificate
        sp = sub.space
        lo1, hi1 = ds.box(beta1)
        d_lo, d_hi = box_bounds(sub.disturbance_set, sub.disturbances)
        n = 500
        lam = rng.uniform(lo1, hi1, size=(n, len(lo1)))
        d = rng.uniform(d_lo, d_hi, size=(n, len(d_lo)))
        x = sample_box(-2 * np.ones(sub.n), 2 * np.ones(sub.n), n, rng, vertices=False)
        z = sub.point(x, lam, d)
        for c in cons:
            vals = {u: cert.free_coefficients.get(u, cert.gram_blocks.get(u)) for u in c.target.unknown_names()}
            lhs = c.target.value(vals)
            rhs = cert.polynomials[f"{c.name}.s0"]
            for j, g in enumerate(c.domain.putinar_generators()):
                rhs = rhs + cert.polynomials[f"{c.name}.s{j + 1}"] * g
            assert (lhs - rhs).max_abs_coeff() <= 1e-7
            # on samples inside the smaller region the generators are non-negative, so lhs >= sigma0 >= 0
            gens = CompiledPolys(c.domain.putinar_generators())(z)
            inside = np.all(gens >= -1e-12, axis=1)
            tv = CompiledPolys([lhs])(z)[:, 0]
            assert np.all(tv[inside] >= -1e-6)


def test_soundness_sampling(fixture_cell):
    from paramsos.pipeline import reported_delta

    prob, res = fixture_cell.problem, fixture_cell.result
    sys = prob.system
    rng = np.random.default_rng(5)
    lo, hi = prob.design.box(res.beta_star)
    d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances)
    lam = rng.uniform(lo, hi, size=(1000, len(lo)))
    d = rng.uniform(d_lo, d_hi, size=(1000, len(d_lo)))
    x, ok = newton_equilibrium(sys, lam, d)
    assert ok.all()
    for blk in res.certificate.blocks:
        ix = [sys.states.index(s) for s in blk.states]
        assert np.max(np.linalg.norm(x[:, ix], axis=1)) <= reported_delta(prob, blk)
    good, a = hurwitz_check(sys, lam, d, x_init=x)
    assert np.all(good) and np.max(a) < 0


def test_fixture_deterministic(fixture_config, fixture_cell):
    from paramsos.pipeline import build_cell

    _, prob = build_cell(fixture_config, 0.02, 1.0)
    top = fixture_cell.trace[-1]
    fz = feasible_at(prob, top.beta)
    assert fz.status.value == top.status
    if fz.feasible:
        assert fz.residual == top.residual


def test_fixture_bounds_kappa_positive(fixture_cell):
    assert fixture_cell.bounds
    for b in fixture_cell.bounds:
        assert b.kappa > 0
        assert b.Gamma == pytest.approx(2.0, rel=1e-6)
        assert b.Delta >= 1.0


def test_corner_screen_rejects_unstable_corner():
    from paramsos.region import _corner_screen

    sp = VarSpace([VarId("x", "state"), VarId("lam", "design")])
    x, lam = sp.vars_of(["x", "lam"])
    # Jacobian at the origin is lam - 1
    sys = ParametricSystem(sp, ["x"], ["lam"], [], [(lam - 1) * x - x ** 3], SemialgebraicSet(sp, [4 - x * x], []),
                           SemialgebraicSet.whole_space(sp))
    ds = DesignSpace(["lam"], [[1.0]], [1.0], [0.1])
    assert _corner_screen(sys, ds, 0.5) == ""
    assert "not Hurwitz" in _corner_screen(sys, ds, 1.5)


def test_scalar_oracle_knife_edge():
    # lam_min = alpha/Delta puts the true equilibrium on |x| = Delta, where the
    # strict decrease margin only holds while the Taylor map is nearly exact
    r = bisect_beta(scalar_problem(0.5), 2.0, 0.01)
    assert 0.5 < r.beta_star < 2.0 and not r.cap_reached
