import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import sdp_min_t, sdp_t_fixed, sdp_unit
from paramsos.sdp import AffineForm, SdpProblem, SolverSettings, Status, psd_project, solve

BACKENDS = ["clarabel", "cvxopt"]


@pytest.mark.parametrize("backend", BACKENDS)
def test_unit_block(backend):
    sol = solve(sdp_unit(), SolverSettings(backend=backend))
    assert sol.status == Status.FEASIBLE
    assert sol.block_values[0] == pytest.approx(np.array([[1.0]]), abs=1e-7)
    assert sol.duality_gap <= 1e-7


@pytest.mark.parametrize("backend", BACKENDS)
def test_min_t(backend):
    sol = solve(sdp_min_t(), SolverSettings(backend=backend))
    assert sol.status == Status.FEASIBLE
    assert sol.objective_value == pytest.approx(1.0, abs=1e-6)
    assert sol.duality_gap <= 1e-7
    assert sol.min_block_eigenvalue >= -1e-8


@pytest.mark.parametrize("backend", BACKENDS)
def test_pinned_t_infeasible(backend):
    sol = solve(sdp_t_fixed(2.0, 1.0), SolverSettings(backend=backend))
    assert sol.status == Status.INFEASIBLE
    assert sol.infeasibility_margin > 0


def test_pinned_t_feasible_when_off_diagonal_small():
    assert solve(sdp_t_fixed(0.5, 1.0)).status == Status.FEASIBLE


def test_deterministic_output():
    a = solve(sdp_min_t())
    b = solve(sdp_min_t())
    assert repr(a) == repr(b)
    assert sdp_min_t().dump() == sdp_min_t().dump()


def test_inconsistent_empty_row():
    p = SdpProblem([1])
    p.add_constraint(AffineForm(), 1.0)
    assert solve(p).status == Status.INFEASIBLE


def test_unknown_backend():
    with pytest.raises(ValueError):
        solve(sdp_unit(), SolverSettings(backend="nope"))


def test_psd_project_examples():
    assert psd_project(np.diag([1.0, -0.5])) == pytest.approx(np.diag([1.0, 0.0]))
    M = np.array([[2.0, 1.0], [1.0, 3.0]])
    assert np.max(np.abs(psd_project(M) - M)) <= 1e-12
    assert psd_project(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(np.full((2, 2), 0.5))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_psd_project_idempotent(vals):
    A = np.array(vals).reshape(3, 3)
    S = psd_project(A + A.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-9
    assert np.allclose(psd_project(S), S, atol=1e-9)
