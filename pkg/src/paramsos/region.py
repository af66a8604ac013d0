"""Certified design regions: SOS program assembly and bisection on beta.

For a fixed ``beta`` the search for a parametric Lyapunov function
``Psi(x, lam)`` is an SOS feasibility problem with three families of
Putinar constraints:

(i)   ``Psi - eps1 |x - x0|^2 >= 0``                on X x Lam(beta) x D
(ii)  ``-grad Psi . f - eps2 |x - x0|^2 >= 0``      on the same set, minus the
      ball ``|x| < r`` (``r = 0`` gives the unrelaxed condition)
(iii) ``Delta^2 - |x0|^2 >= 0``                     on Lam(beta) x D

where ``x0`` is a truncated Taylor map of the perturbed equilibrium.
Decoupled subsystems are certified separately and a ``beta`` is feasible
when every block is.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .equilibrium import (
    EquilibriumMap,
    NewtonDivergence,
    UnvalidatedEquilibriumMap,
    taylor_equilibrium,
    validate_equilibrium_map,
)
from .polyring import Polynomial, mono_mul, monomial_basis, to_text
from .sdp import SolverSettings, Status
from .sos import (
    FREE,
    AffineExpr,
    DegreeInconsistency,
    Infeasible,
    PolynomialUnknown,
    PutinarConstraint,
    SemialgebraicSet,
    SosCertificate,
    compile_feasibility,
    solve_program,
)
from .system import DesignSpace, ParametricSystem, UnboundedSet, box_bounds, box_vertices

logger = logging.getLogger(__name__)

PSI = "psi"


class EmptyRegion(RuntimeError):
    """No certificate even at the smallest probed beta."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


@dataclass
class LyapunovTemplate:
    state_degree: int = 2
    lambda_degree: int = 0
    eps1: float = 1e-4
    eps2: float = 1e-4
    decrease_radius: float | None = None  # None: use Delta
    multiplier_degree: int | None = None
    interval_products: bool = True  # add redundant (hi - v)(v - lo) >= 0 generators

    def __post_init__(self):
        if self.state_degree < 2 or self.state_degree % 2:
            raise DegreeInconsistency("state_degree must be even and >= 2")
        if self.lambda_degree < 0:
            raise DegreeInconsistency("lambda_degree must be >= 0")
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("eps1 and eps2 must be positive")
        if self.decrease_radius is not None and self.decrease_radius < 0:
            raise ValueError("decrease_radius must be >= 0")


def psi_unknown(sys: ParametricSystem, template: LyapunovTemplate) -> PolynomialUnknown:
    """Free polynomial with x-degree <= state_degree and lam-degree <= lambda_degree."""
    sp = sys.space
    xb = monomial_basis(sp, sys.states, template.state_degree)
    lb = monomial_basis(sp, sys.design, template.lambda_degree) if sys.design else [()]
    basis = [mono_mul(a, b) for b in lb for a in xb]
    return PolynomialUnknown(PSI, sp, list(sys.states) + list(sys.design), template.state_degree
                             + template.lambda_degree, FREE, basis=basis)


def interval_generators(space, names, lo, hi) -> SemialgebraicSet:
    """``(hi - v)(v - lo) >= 0`` per variable.

    These are implied by the linear bounds, but with them a degree-2
    multiplier can cancel terms whose coefficients vary with the bounded
    variable, which linear generators alone would need an odd-degree
    multiplier for.
    """
    gens = []
    for n, a, b in zip(names, lo, hi):
        v = space.var(n)
        gens.append((b - v) * (v - a))
    return SemialgebraicSet(space, gens, [], name="intervals")


def _dist2(sys: ParametricSystem, x0map: EquilibriumMap) -> Polynomial:
    sp = sys.space
    acc = sp.zero()
    for s in sys.states:
        e = sp.var(s) - x0map.components[x0map.states.index(s)]
        acc = acc + e * e
    return acc


def assemble_program(
    sys: ParametricSystem,
    x0map: EquilibriumMap,
    template: LyapunovTemplate,
    design: DesignSpace,
    beta: float,
    delta: float,
    require_validated: bool = True,
):
    """Putinar constraints (i)-(iii) and the unknown ``Psi`` for one beta."""
    if require_validated and x0map.validity_report is None:
        raise UnvalidatedEquilibriumMap("equilibrium map has no validity report")
    if delta <= 0:
        raise ValueError("Delta must be positive")
    sp = sys.space
    psi = psi_unknown(sys, template)
    P = psi.expr()
    lam_set = design.region(sp, beta)
    X, D = sys.state_domain, sys.disturbance_set
    if template.interval_products:
        lam_set = lam_set & interval_generators(sp, sys.design, *design.box(beta))
        if sys.disturbances:
            try:
                D = D & interval_generators(sp, sys.disturbances, *box_bounds(D, sys.disturbances))
            except UnboundedSet:
                pass
    full = X & lam_set & D
    dist2 = _dist2(sys, x0map)

    c1 = PutinarConstraint(P - template.eps1 * dist2, full, template.multiplier_degree, name="lower")

    dpsi = None
    for s, fi in zip(sys.states, sys.f):
        term = P.differentiate(s) * fi
        dpsi = term if dpsi is None else dpsi + term
    r = delta if template.decrease_radius is None else template.decrease_radius
    dom2 = full
    if r > 0:
        xs = sp.vars_of(sys.states)
        outside = sum((v * v for v in xs), sp.zero()) - r * r
        dom2 = full & SemialgebraicSet(sp, [outside], [], name=f"outside(r={r:g})")
    c2 = PutinarConstraint(dpsi * (-1.0) - template.eps2 * dist2, dom2, template.multiplier_degree, name="decrease")

    x0sq = sum((c * c for c in x0map.components), sp.zero())
    c3 = PutinarConstraint(AffineExpr.lift(delta * delta - x0sq), lam_set & D, template.multiplier_degree,
                           name="excursion")
    return [c1, c2, c3], [psi]


# -- feasibility over blocks ----------------------------------------------------


@dataclass
class BlockCertificate:
    states: list
    psi: Polynomial
    certificate: SosCertificate
    eps_eq: float
    dimensions: dict

    def psi_text(self) -> str:
        return to_text(self.psi)


@dataclass
class Feasibility:
    beta: float
    status: Status
    blocks: list = field(default_factory=list)  # BlockCertificate for feasible blocks
    residual: float = float("nan")
    message: str = ""
    flagged: bool = False  # numerical trouble, counted as infeasible

    @property
    def feasible(self) -> bool:
        return self.status == Status.FEASIBLE


@dataclass
class RegionProblem:
    """Everything needed to decide feasibility at a given beta."""

    system: ParametricSystem
    design: DesignSpace
    delta: float
    template: LyapunovTemplate = field(default_factory=LyapunovTemplate)
    taylor_order: tuple = (1, 1)
    validation_samples: int = 200
    seed: int = 0
    settings: SolverSettings | None = None
    blocks: list | None = None
    name: str = ""

    def __post_init__(self):
        self.system.check_nominal()
        if self.blocks is None:
            self.blocks = self.system.split(self.design)
        self._sub = {}
        self._maps = {}

    def block(self, states: Sequence[str]):
        """``(subsystem, design space)`` for one decoupled block."""
        key = tuple(states)
        if key not in self._sub:
            sub = self.system.subsystem(list(states))
            self._sub[key] = (sub, self.design.restrict(sub.design))
        return self._sub[key]

    def equilibrium_map(self, states: Sequence[str], beta: float) -> EquilibriumMap:
        """Taylor map centered at the middle of the design box at ``beta``."""
        key = (tuple(states), float(beta))
        if key not in self._maps:
            sub, ds = self.block(states)
            lo, hi = ds.box(beta)
            center = dict(zip(ds.variables, 0.5 * (lo + hi)))
            x0 = taylor_equilibrium(sub, *self.taylor_order, center=center)
            validate_equilibrium_map(x0, sub, ds, beta, self.validation_samples, self.seed)
            self._maps[key] = x0
        return self._maps[key]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for fi in self.system.f:
            h.update(to_text(fi).encode())
        for S in (self.system.state_domain, self.system.disturbance_set):
            for p in S.putinar_generators():
                h.update(to_text(p).encode())
        t = self.template
        h.update(repr((self.design.variables, self.design.G.tolist(), self.design.h.tolist(),
                       self.design.lower_bounds.tolist(), self.delta, t.state_degree, t.lambda_degree,
                       t.eps1, t.eps2, t.decrease_radius, t.multiplier_degree, tuple(self.taylor_order),
                       self.validation_samples, self.seed)).encode())
        return h.hexdigest()[:16]


def _corner_screen(sub: ParametricSystem, ds: DesignSpace, beta: float) -> str:
    """Reason string if some (design corner, disturbance corner) is not Hurwitz.

    The certificate alone only forces decrease away from the equilibrium
    ball, so it does not imply local stability of x0; corners of the region
    are screened directly before any SDP is built.
    """
    from .validate import hurwitz_check

    lo, hi = ds.box(beta)
    L = box_vertices(lo, hi)
    if sub.disturbances:
        d_lo, d_hi = box_bounds(sub.disturbance_set, sub.disturbances)
        D = box_vertices(d_lo, d_hi)
    else:
        D = np.zeros((1, 0))
    L, D = np.repeat(L, len(D), axis=0), np.tile(D, (len(L), 1))
    try:
        ok, a = hurwitz_check(sub, L, D)
    except NewtonDivergence:
        return ""  # left to the equilibrium-map validation
    ok, a = np.atleast_1d(ok), np.atleast_1d(a)
    if np.all(ok):
        return ""
    k = int(np.argmax(a))
    return f"Jacobian not Hurwitz at corner lambda={L[k].tolist()}, delta={D[k].tolist()} (abscissa {a[k]:.3g})"


def feasible_at(problem: RegionProblem, beta: float) -> Feasibility:
    """Decide one beta; blocks are checked in order and the first failure stops."""
    if problem.design.is_empty(beta):
        return Feasibility(beta, Status.INFEASIBLE, message="design region is empty")
    certs, worst = [], 0.0
    for states in problem.blocks:
        sub, ds = problem.block(states)
        x0 = problem.equilibrium_map(states, beta)
        rep = x0.validity_report
        if rep.n_failed or not math.isfinite(rep.max_discrepancy):
            # Newton trouble is not a proof of infeasibility: flag it
            return Feasibility(beta, Status.NUMERICAL_FAILURE, certs, message=f"block {states}: no equilibrium "
                               f"for {rep.n_failed} of {rep.n_samples} samples", flagged=True)
        unstable = _corner_screen(sub, ds, beta)
        if unstable:
            return Feasibility(beta, Status.INFEASIBLE, certs, message=f"block {states}: {unstable}")
        cons, unk = assemble_program(sub, x0, problem.template, ds, beta, problem.delta)
        prog = compile_feasibility(cons, unk)
        res = solve_program(prog, problem.settings)
        if isinstance(res, Infeasible):
            flagged = res.status == Status.NUMERICAL_FAILURE
            return Feasibility(beta, res.status, certs, message=f"block {states}: {res.reason}", flagged=flagged)
        worst = max(worst, res.residual_polynomial_norm)
        certs.append(BlockCertificate(list(states), res.polynomial(PSI), res, rep.max_discrepancy,
                                      prog.dimensions()))
    return Feasibility(beta, Status.FEASIBLE, certs, residual=worst)


# -- bisection -------------------------------------------------------------------


@dataclass
class TraceEntry:
    beta: float
    status: str
    residual: float
    flagged: bool
    message: str = ""

    def line(self) -> str:
        flag = " [flagged]" if self.flagged else ""
        return f"beta={self.beta:.6g} status={self.status} residual={self.residual:.3g}{flag}"


@dataclass
class RegionResult:
    beta_star: float
    certificate: Feasibility
    trace: list
    config_fingerprint: str
    cap_reached: bool = False
    bounds: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def status(self) -> str:
        return "cap" if self.cap_reached else "ok"


def _entry(fz: Feasibility) -> TraceEntry:
    return TraceEntry(float(fz.beta), fz.status.value, float(fz.residual), fz.flagged, fz.message)


def bisect_beta(
    oracle: Callable[[float], Feasibility] | RegionProblem,
    beta_max: float,
    tol: float = 0.01,
    beta_min: float | None = None,
    max_iter: int = 20,
    fingerprint: str = "",
) -> RegionResult:
    """Largest feasible beta to within ``tol``.

    ``beta_max`` is probed first (feasible means the cap is reached), then
    the smallest meaningful beta (``beta_min``, by default the smallest beta
    with a non-empty design region).  In between, plain bisection keeps
    ``lo`` feasible and ``hi`` not.
    """
    if not beta_max > 0:
        raise ValueError("beta_max must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    if isinstance(oracle, RegionProblem):
        prob = oracle
        fingerprint = fingerprint or prob.fingerprint()
        if beta_min is None:
            beta_min = prob.design.min_beta()
        oracle = lambda b: feasible_at(prob, b)  # noqa: E731
    beta_min = 0.0 if beta_min is None else float(beta_min)
    if not math.isfinite(beta_min) or beta_min > beta_max:
        raise EmptyRegion(f"design region is empty for every beta <= {beta_max}")

    trace = []

    def probe(b):
        fz = oracle(b)
        trace.append(_entry(fz))
        logger.info("%s", trace[-1].line())
        return fz

    top = probe(beta_max)
    if top.feasible:
        return RegionResult(beta_max, top, trace, fingerprint, True, wall_time=time.perf_counter() - t0)
    best = probe(beta_min)
    if not best.feasible:
        raise EmptyRegion(f"no certificate at beta={beta_min:g}", trace)
    lo, hi = beta_min, beta_max
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        fz = probe(mid)
        if fz.feasible:
            lo, best = mid, fz
        else:
            hi = mid
    return RegionResult(lo, best, trace, fingerprint, False, wall_time=time.perf_counter() - t0)


def max_solver_calls(beta_max: float, tol: float) -> int:
    return math.ceil(math.log2(beta_max / tol)) + 2


def trace_is_monotone(trace: Sequence[TraceEntry]) -> bool:
    """No feasible beta above an infeasible one (flagged entries exempt)."""
    infeasible = [t.beta for t in trace if t.status != Status.FEASIBLE.value and not t.flagged]
    feasible = [t.beta for t in trace if t.status == Status.FEASIBLE.value]
    return not infeasible or not feasible or max(feasible) < min(infeasible)

