"""Nominal power flow and polynomial approximations of the perturbed equilibrium."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import NetworkSpec
from .polyring import CompiledPolys, Polynomial, mono_degree_in
from .system import DesignSpace, ParametricSystem, box_bounds, box_vertices

logger = logging.getLogger(__name__)


class NewtonDivergence(ArithmeticError):
    pass


class SingularJacobian(ArithmeticError):
    pass


class UnvalidatedEquilibriumMap(ValueError):
    pass


# -- power flow ---------------------------------------------------------------


@dataclass
class PowerFlowSolution:
    bus_ids: list
    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int
    residual: float
    residual_history: list
    delta_nominal: dict  # (inverter bus, neighbor bus) -> (delta1, delta2)

    def voltage(self, bus_id) -> float:
        return float(self.v[self.bus_ids.index(bus_id)])

    def angle(self, bus_id) -> float:
        return float(self.theta[self.bus_ids.index(bus_id)])


def _power(Y, V):
    return V * np.conj(Y @ V)


def _dS(Y, V):
    I = Y @ V
    Vn = V / np.abs(V)
    dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
    dVm = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.conj(np.diag(I)) @ np.diag(Vn)
    return dVa, dVm


def newton_powerflow(net: NetworkSpec, tol: float = 1e-10, max_iter: int = 50) -> PowerFlowSolution:
    """Steady-state power flow from a flat start.

    The first inverter bus is the angle reference (slack); other inverter
    buses regulate voltage to their nominal value and inject ``p_set``; all
    other buses are constant-power loads.
    """
    ids = [b.id for b in net.buses]
    n = len(ids)
    Y = net.admittance()
    slack = net.index(net.inverters[0].bus)
    inv_buses = {net.index(inv.bus) for inv in net.inverters}
    pv = sorted(inv_buses - {slack})
    pq = [i for i in range(n) if i not in inv_buses]
    non_slack = [i for i in range(n) if i != slack]

    p_spec = np.array([-b.load_p for b in net.buses])
    q_spec = np.array([-b.load_q for b in net.buses])
    for inv in net.inverters:
        p_spec[net.index(inv.bus)] += inv.p_set

    vm = np.array([b.v_nominal for b in net.buses], dtype=float)
    va = np.zeros(n)

    history = []
    it = 0
    while True:
        V = vm * np.exp(1j * va)
        S = _power(Y, V)
        mis = np.concatenate([S.real[non_slack] - p_spec[non_slack], S.imag[pq] - q_spec[pq]])
        res = float(np.max(np.abs(mis))) if mis.size else 0.0
        history.append(res)
        it += 1
        if res <= tol:
            break
        if it > max_iter or not np.isfinite(res) or res > 1e6:
            raise NewtonDivergence(f"power flow did not converge (residual {res:.3e} after {it} iterations)")
        dVa, dVm = _dS(Y, V)
        J = np.block([
            [dVa.real[np.ix_(non_slack, non_slack)], dVm.real[np.ix_(non_slack, pq)]],
            [dVa.imag[np.ix_(pq, non_slack)], dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            if np.linalg.cond(J) > 1e14:
                raise np.linalg.LinAlgError
            dx = np.linalg.solve(J, -mis)
        except np.linalg.LinAlgError:
            raise SingularJacobian("power-flow Jacobian is singular") from None
        va[non_slack] += dx[: len(non_slack)]
        vm[pq] += dx[len(non_slack):]

    V = vm * np.exp(1j * va)
    S = _power(Y, V)
    deltas = {}
    for inv in net.inverters:
        i = net.index(inv.bus)
        for k_id, _, _ in net.neighbors(inv.bus):
            k = net.index(k_id)
            th = va[i] - va[k]
            deltas[(inv.bus, k_id)] = (float(vm[k] * np.cos(th)), float(vm[k] * np.sin(th)))
    return PowerFlowSolution(ids, vm.copy(), va.copy(), S.real.copy(), S.imag.copy(), it, history[-1], history, deltas)


# -- equilibrium of a parametric system ------------------------------------------


@dataclass
class ValidityReport:
    max_residual: float
    max_discrepancy: float
    n_samples: int
    n_failed: int
    seed: int
    beta: float | None = None

    def to_text(self) -> str:
        return (
            f"max_residual = {self.max_residual!r}\n"
            f"max_discrepancy = {self.max_discrepancy!r}\n"
            f"samples = {self.n_samples}\n"
            f"failed = {self.n_failed}\n"
            f"seed = {self.seed}\n"
        )


@dataclass
class EquilibriumMap:
    states: list
    components: list  # Polynomial in (lam, delta), one per state
    expansion_order: tuple
    center: dict
    validity_report: ValidityReport | None = None

    def __post_init__(self):
        self._compiled = None

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Evaluate at dense point(s) of the owning VarSpace."""
        if self._compiled is None:
            self._compiled = CompiledPolys(self.components)
        return self._compiled(z)

    def restrict(self, states: Sequence[str]) -> "EquilibriumMap":
        idx = [self.states.index(s) for s in states]
        return EquilibriumMap(list(states), [self.components[i] for i in idx], self.expansion_order,
                              dict(self.center), self.validity_report)


def _truncate(p: Polynomial, dist_idx: frozenset, lam_idx: frozenset, od: int, ol: int) -> Polynomial:
    return Polynomial(p.space, {
        m: c for m, c in p.terms.items()
        if mono_degree_in(m, dist_idx) <= od and mono_degree_in(m, lam_idx) <= ol
    })


def taylor_equilibrium(
    sys: ParametricSystem,
    order_delta: int = 1,
    order_lambda: int = 1,
    center: dict | None = None,
) -> EquilibriumMap:
    """Truncated Taylor expansion of the solution of ``f(x, lam, delta) = 0``.

    The expansion is about ``x = 0, delta = 0`` and ``lam = center``
    (default: all design variables at 0).  Coefficients follow from the
    implicit-function fixed point ``x = -J^{-1} r(x, lam, delta)`` iterated in
    the truncated ring, which is exact after ``order_delta + order_lambda``
    sweeps because each sweep raises the order of the error.
    """
    if order_delta < 0 or order_lambda < 0:
        raise ValueError("orders must be non-negative")
    sys.check_nominal()
    sp = sys.space
    center = {v: float((center or {}).get(v, 0.0)) for v in sys.design}
    shift = {v: sp.var(v) + c for v, c in center.items() if c}
    f = [fi.substitute(shift) if shift else fi for fi in sys.f]

    zero = {v: 0.0 for v in sys.states + sys.design + sys.disturbances}
    J = np.array([[fi.differentiate(x).evaluate(zero) for x in sys.states] for fi in f])
    if sys.n and (not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e12):
        raise SingularJacobian("state Jacobian at the expansion point is singular")
    Jinv = np.linalg.inv(J) if sys.n else J

    dist_idx = frozenset(sp.index(v) for v in sys.disturbances)
    lam_idx = frozenset(sp.index(v) for v in sys.design)
    xs = sp.vars_of(sys.states)
    resid = []
    for i, fi in enumerate(f):
        lin = sp.zero()
        for j, xj in enumerate(xs):
            lin = lin + J[i, j] * xj
        resid.append(fi - lin)

    X = [sp.zero() for _ in sys.states]
    for sweep in range(order_delta + order_lambda + 3):
        bind = dict(zip(sys.states, X))
        R = [_truncate(r.substitute(bind), dist_idx, lam_idx, order_delta, order_lambda) for r in resid]
        new = []
        for i in range(sys.n):
            acc = sp.zero()
            for j in range(sys.n):
                if Jinv[i, j]:
                    acc = acc - Jinv[i, j] * R[j]
            new.append(acc)
        if all(a.allclose(b, 0.0) for a, b in zip(new, X)):
            break
        X = new
    else:
        raise ArithmeticError("Taylor fixed point did not settle")

    unshift = {v: sp.var(v) - c for v, c in center.items() if c}
    comps = [x.substitute(unshift) if unshift else x for x in X]
    # nominal condition: every term carries at least one disturbance factor
    for c in comps:
        if any(mono_degree_in(m, dist_idx) == 0 for m in c.terms):
            raise ArithmeticError("equilibrium map has disturbance-free terms")
    return EquilibriumMap(list(sys.states), comps, (order_delta, order_lambda), center)


def newton_equilibrium(
    sys: ParametricSystem,
    lam: np.ndarray,
    d: np.ndarray,
    x_init: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iter: int = 50,
):
    """Batched Newton solve of ``f(x, lam, d) = 0``.

    Returns ``(x, converged)`` with shapes ``(N, n)`` and ``(N,)``.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    N = max(lam.shape[0], d.shape[0])
    lam = np.broadcast_to(lam, (N, lam.shape[1]))
    d = np.broadcast_to(d, (N, d.shape[1]))
    x = np.zeros((N, sys.n)) if x_init is None else np.array(np.atleast_2d(x_init), dtype=float)
    active = np.ones(N, dtype=bool)
    converged = np.zeros(N, dtype=bool)
    for _ in range(max_iter):
        F = sys.rhs(x, lam, d)
        err = np.max(np.abs(F), axis=1)
        converged |= err <= tol
        active = ~converged & np.isfinite(err) & (err < 1e8)
        if not active.any():
            break
        Jm = sys.jacobian_at(x[active], lam[active], d[active])
        try:
            step = np.linalg.solve(Jm, -F[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Ji, -Fi, rcond=None)[0] for Ji, Fi in zip(Jm, F[active])])
        x[active] += step
    F = sys.rhs(x, lam, d)
    converged = np.max(np.abs(F), axis=1) <= max(tol, 1e-10)
    return x, converged


def equilibrium_samples(
    sys: ParametricSystem,
    design: DesignSpace,
    beta: float,
    n: int,
    seed: int,
    vertices: bool = True,
):
    """Deterministic ``(lam, d)`` samples from the design region and disturbance box."""
    rng = np.random.default_rng(seed)
    design = design.restrict([v for v in design.variables if v in sys.design]) if set(design.variables) != set(sys.design) else design
    lam_lo, lam_hi = design.box(beta)
    order = [design.variables.index(v) for v in sys.design]
    lam_lo, lam_hi = lam_lo[order], lam_hi[order]
    if sys.disturbances:
        d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances)
    else:
        d_lo = d_hi = np.zeros(0)
    lo = np.concatenate([lam_lo, d_lo])
    hi = np.concatenate([lam_hi, d_hi])
    pts = rng.uniform(lo, hi, size=(n, len(lo)))
    if vertices and len(lo) <= 12:
        pts = np.vstack([box_vertices(lo, hi), pts])
    nl = len(lam_lo)
    lam, d = pts[:, :nl], pts[:, nl:]
    keep = np.array([design.contains(l_, beta) for l_ in lam])
    return lam[keep], d[keep]


def validate_equilibrium_map(
    x0map: EquilibriumMap,
    sys: ParametricSystem,
    design: DesignSpace,
    beta: float,
    samples: int = 200,
    seed: int = 0,
) -> ValidityReport:
    """Compare the polynomial map with Newton-refined equilibria on samples."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    lam, d = equilibrium_samples(sys, design, beta, samples, seed)
    z = sys.point(None, lam, d)
    xt = x0map(z)
    xn, ok = newton_equilibrium(sys, lam, d, x_init=xt)
    resid = np.max(np.abs(sys.rhs(xt, lam, d)), axis=1) if len(lam) else np.zeros(0)
    disc = np.linalg.norm(xt - xn, axis=1)
    failed = int(np.sum(~ok))
    max_disc = float(np.max(disc[ok])) if np.any(ok) else float("inf")
    if failed:
        max_disc = float("inf")
    rep = ValidityReport(
        max_residual=float(np.max(resid)) if resid.size else 0.0,
        max_discrepancy=max_disc if len(lam) else 0.0,
        n_samples=int(len(lam)),
        n_failed=failed,
        seed=seed,
        beta=beta,
    )
    x0map.validity_report = rep
    return rep
