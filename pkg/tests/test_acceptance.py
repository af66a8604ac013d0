"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The lines are printed in the terminal summary (see conftest).  Criteria 4, 5,
6 and 8 share one fixture sweep.
"""

import time

import numpy as np
import pytest

from cases import scalar_problem, sdp_min_t, sdp_t_fixed, sdp_unit
from conftest import ACCEPTANCE
from paramsos.pipeline import (
    build_cell,
    instability_onset,
    monotone_in_alpha,
    monotone_in_c,
    monte_carlo,
    sweep,
)
from paramsos.region import EmptyRegion, bisect_beta, trace_is_monotone
from paramsos.sdp import Status, solve
from paramsos.sos import Infeasible, check_sos

ALPHAS = [0.02, 0.05, 0.1]
CS = [0.5, 1.0]
MC_SAMPLES = 500


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_sos_engine():
    from test_sos import MOTZKIN, MOTZKIN_GRAM_SHIFT, x, y

    t0 = time.perf_counter()
    good = [check_sos((x + y) ** 2), check_sos(x ** 4 + x ** 2 + 1)]
    bad = [check_sos(x ** 2 - 1), check_sos(MOTZKIN)]
    dt = time.perf_counter() - t0
    ok = (
        all(not isinstance(c, Infeasible) and c.residual_polynomial_norm <= 1e-7 for c in good)
        and all(isinstance(c, Infeasible) for c in bad)
        and MOTZKIN_GRAM_SHIFT > 0
        and dt < 10
    )
    res = max(c.residual_polynomial_norm for c in good if not isinstance(c, Infeasible))
    record(1, ok, f"sos examples, max residual {res:.1e}, {dt:.1f}s")


def test_criterion_2_sdp_micro():
    t0 = time.perf_counter()
    sols = [solve(sdp_unit()), solve(sdp_min_t()), solve(sdp_t_fixed(2.0, 1.0))]
    again = [solve(sdp_unit()), solve(sdp_min_t()), solve(sdp_t_fixed(2.0, 1.0))]
    dt = time.perf_counter() - t0
    ok = (
        sols[0].status == Status.FEASIBLE and sols[0].duality_gap <= 1e-7
        and sols[1].status == Status.FEASIBLE and sols[1].duality_gap <= 1e-7
        and abs(sols[1].objective_value - 1.0) <= 1e-6
        and sols[2].status == Status.INFEASIBLE
        and [repr(s) for s in sols] == [repr(s) for s in again]
        and dt < 5
    )
    record(2, ok, f"three instances, gaps {sols[0].duality_gap:.1e}/{sols[1].duality_gap:.1e}, {dt:.2f}s")


def test_criterion_3_scalar_pipeline():
    # |x0| = |d|/lam is worst at lam_min, so the region exists iff lam_min >= alpha/Delta;
    # the threshold is resolved to the bisection tolerance on both sides
    alpha, delta, tol = 0.5, 1.0, 0.01
    edge = alpha / delta
    t0 = time.perf_counter()
    ok = True
    for lam_min in (edge + tol, 0.8, 1.5):
        r = bisect_beta(scalar_problem(lam_min, alpha, delta), 2.0, tol)
        ok &= abs(r.beta_star - 2.0) <= tol and r.cap_reached
    for lam_min in (edge - tol, 0.2):
        try:
            bisect_beta(scalar_problem(lam_min, alpha, delta), 2.0, tol)
            ok = False
        except EmptyRegion:
            pass
    dt = time.perf_counter() - t0
    record(3, ok and dt < 30, f"cap for lam_min >= {edge + tol:g}, empty for lam_min <= {edge - tol:g}, {dt:.1f}s")


@pytest.fixture(scope="module")
def fixture_sweep(fixture_config):
    t0 = time.perf_counter()
    cells = sweep(fixture_config, ALPHAS, CS, with_bounds=False)
    return cells, time.perf_counter() - t0


def test_criterion_4_fixture_certification(fixture_sweep):
    cells, total = fixture_sweep
    ok = total < 45 * 60
    for r in cells:
        if r.status in ("ok", "cap"):
            ok &= r.beta_star > 0 and r.result.certificate.residual <= 1e-7
        elif r.status == "empty":
            ok &= trace_is_monotone(r.trace)
        else:
            ok = False
        ok &= r.wall_time < 10 * 60
    anchor = next(r for r in cells if r.alpha == 0.02 and r.c == 1.0)
    ok &= anchor.status in ("ok", "cap")
    table = ", ".join(f"({r.alpha:g},{r.c:g})={r.beta_star:.4g}" if r.status != "empty" else
                      f"({r.alpha:g},{r.c:g})=empty" for r in cells)
    record(4, ok, f"{table}; {total:.0f}s")


def test_criterion_5_monotone(fixture_sweep):
    cells, _ = fixture_sweep
    record(5, monotone_in_alpha(cells) and monotone_in_c(cells), "beta* non-increasing in alpha, c=0.5 <= c=1")


def test_criterion_6_soundness_monte_carlo(fixture_sweep):
    cells, _ = fixture_sweep
    t0 = time.perf_counter()
    ok, n_cex, done = True, 0, 0
    for r in cells:
        if r.status not in ("ok", "cap"):
            continue
        rep = monte_carlo(r.problem, r.result, MC_SAMPLES, seed=0)
        n_cex += len(rep.counterexamples)
        ok &= rep.passed and rep.n_hurwitz > 0 and rep.n_energy > 0
        done += 1
    dt = time.perf_counter() - t0
    record(6, ok and done > 0 and dt < 300, f"{done} cells x {MC_SAMPLES} samples, {n_cex} counterexamples, {dt:.0f}s")


def test_criterion_7_invariants():
    import test_microgrid
    import test_polyring
    import test_validate

    t0 = time.perf_counter()
    test_polyring.test_ring_axioms()
    test_polyring.test_derivative_matches_finite_difference()
    test_microgrid.test_recast_identity()
    test_validate.test_rk4_order()
    test_polyring.test_basis_count()
    dt = time.perf_counter() - t0
    record(7, dt < 120, f"ring axioms, derivative, recast, rk4 order, basis counts, {dt:.1f}s")


def test_criterion_8_negative_control(fixture_sweep, fixture_config):
    cells, _ = fixture_sweep
    r = next(r for r in cells if r.alpha == 0.02 and r.c == 1.0)
    model, _ = build_cell(fixture_config, r.alpha, r.c)
    onset = instability_onset(model)
    t0 = time.perf_counter()
    beta = 3 * r.beta_star
    rep = monte_carlo(r.problem, r.result, MC_SAMPLES, seed=0, beta=beta)
    dt = time.perf_counter() - t0
    ok = beta > onset and not rep.passed and dt < 180
    record(8, ok, f"beta = {beta:.3g} (onset {onset:.3g}): {len(rep.counterexamples)} counterexamples, {dt:.0f}s")
