"""End-to-end runs: configuration -> model -> certified region -> checks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .bounds import BoundsReport, bounds_report, largest_state_ball
from .config import AnalysisSettings, Config
from .microgrid import EquilibriumDomain, MicrogridModel, build_parametric_system
from .region import EmptyRegion, LyapunovTemplate, RegionProblem, RegionResult, bisect_beta
from .sdp import SolverSettings
from .system import box_vertices
from .validate import CheckSpec, MonteCarloReport, monte_carlo_check

logger = logging.getLogger(__name__)


@dataclass
class CellResult:
    alpha: float
    c: float
    status: str  # "ok", "cap", "empty"
    beta_star: float
    result: RegionResult | None
    trace: list
    wall_time: float
    model: MicrogridModel | None = None
    problem: RegionProblem | None = None
    bounds: list = field(default_factory=list)
    message: str = ""


def template_from(s: AnalysisSettings) -> LyapunovTemplate:
    return LyapunovTemplate(s.state_degree, s.lambda_degree, s.eps1, s.eps2, s.decrease_radius,
                            s.multiplier_degree)


def build_cell(cfg: Config, alpha: float, c: float, s: AnalysisSettings | None = None):
    s = s or cfg.analysis
    model = build_parametric_system(cfg.network, alpha=alpha, domain=EquilibriumDomain(c),
                                    state_radius=s.state_radius, lam_min=s.lambda_min, q_share=s.q_share)
    prob = RegionProblem(model.system, model.design_space, model.excursion_bound, template_from(s),
                         (s.taylor_order_delta, s.taylor_order_lambda), s.validation_samples, s.seed,
                         SolverSettings(backend=s.backend), blocks=model.blocks(), name=f"alpha={alpha:g},c={c:g}")
    return model, prob


def certify_cell(cfg: Config, alpha: float, c: float, s: AnalysisSettings | None = None,
                 with_bounds: bool = True) -> CellResult:
    s = s or cfg.analysis
    t0 = time.perf_counter()
    model, prob = build_cell(cfg, alpha, c, s)
    try:
        res = bisect_beta(prob, s.beta_max, s.tol, fingerprint=cfg.fingerprint() + ":" + prob.fingerprint())
    except EmptyRegion as exc:
        return CellResult(alpha, c, "empty", 0.0, None, exc.trace, time.perf_counter() - t0, model, prob,
                          message=str(exc))
    if with_bounds:
        res.bounds = block_bounds(prob, res)
    return CellResult(alpha, c, res.status, res.beta_star, res, res.trace, time.perf_counter() - t0, model, prob,
                      res.bounds)


def reported_delta(prob: RegionProblem, block) -> float:
    """Excursion bound including the sampled Taylor-map discrepancy."""
    return prob.delta + block.eps_eq


def block_bounds(prob: RegionProblem, res: RegionResult) -> list[BoundsReport]:
    out = []
    for blk in res.certificate.blocks:
        sub, ds = prob.block(blk.states)
        lo, hi = ds.box(res.beta_star)
        lam_pts = [v for v in box_vertices(lo, hi) if ds.contains(v, res.beta_star)] or [lo]
        out.append(bounds_report(blk.psi, sub, np.array(lam_pts), reported_delta(prob, blk), prob.template.eps2,
                                 seed=prob.seed))
    return out


def check_spec(prob: RegionProblem, res: RegionResult, beta: float | None = None) -> CheckSpec:
    """Monte Carlo inputs for a result; ``beta`` overrides the certified value (negative controls)."""
    beta = res.beta_star if beta is None else beta
    lo, hi = prob.design.box(beta)
    sys = prob.system
    gammas = [largest_state_ball(sys.subsystem(b).state_domain, b) for b in prob.blocks]
    by_states = {tuple(b.states): b for b in res.certificate.blocks}
    delta, psi, radius = {}, {}, {}
    r = prob.template.decrease_radius
    for k, states in enumerate(prob.blocks):
        blk = by_states.get(tuple(states))
        delta[k] = reported_delta(prob, blk) if blk is not None else prob.delta
        psi[k] = blk.psi if blk is not None else None
        radius[k] = prob.delta if r is None else r
    return CheckSpec(sys, [list(b) for b in prob.blocks], lo, hi, lambda lam: prob.design.contains(lam, beta),
                     float(min(gammas)), delta, psi, radius, beta)


def monte_carlo(prob: RegionProblem, res: RegionResult, n: int, seed: int = 0, beta: float | None = None,
                **kw) -> MonteCarloReport:
    return monte_carlo_check(check_spec(prob, res, beta), n, seed, **kw)


def sweep(cfg: Config, alphas, cs, s: AnalysisSettings | None = None, jobs: int = 1,
          with_bounds: bool = True) -> list[CellResult]:
    """All (alpha, c) cells, sorted by (alpha, c) regardless of completion order."""
    cells = [(a, c) for a in alphas for c in cs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_cell_job, cfg, a, c, s, with_bounds) for a, c in cells]
            out = [f.result() for f in futs]
    else:
        out = [_safe_certify(cfg, a, c, s, with_bounds) for a, c in cells]
    return sorted(out, key=lambda r: (r.alpha, r.c))


def _safe_certify(cfg, a, c, s, with_bounds) -> CellResult:
    """A failing cell is recorded with status "error" so the sweep can go on."""
    t0 = time.perf_counter()
    try:
        return certify_cell(cfg, a, c, s, with_bounds)
    except Exception as exc:  # noqa: BLE001
        logger.exception("cell alpha=%g c=%g failed", a, c)
        return CellResult(a, c, "error", 0.0, None, [], time.perf_counter() - t0, message=f"{type(exc).__name__}: {exc}")


def _cell_job(cfg, a, c, s, with_bounds):
    r = _safe_certify(cfg, a, c, s, with_bounds)
    r.model = r.problem = None  # keep the payload picklable and small
    return r


def monotone_in_alpha(cells: list[CellResult]) -> bool:
    by_c: dict = {}
    for r in cells:
        by_c.setdefault(r.c, []).append(r)
    for rows in by_c.values():
        rows.sort(key=lambda r: r.alpha)
        for a, b in zip(rows, rows[1:]):
            if b.beta_star > a.beta_star:
                return False
    return True


def monotone_in_c(cells: list[CellResult]) -> bool:
    by_a: dict = {}
    for r in cells:
        by_a.setdefault(r.alpha, []).append(r)
    for rows in by_a.values():
        rows.sort(key=lambda r: r.c)
        for a, b in zip(rows, rows[1:]):
            if a.beta_star > b.beta_star:
                return False
    return True


def instability_onset(model: MicrogridModel, beta_max: float = 10.0, n_grid: int = 400) -> float:
    """Smallest beta at which some design-region corner has a non-Hurwitz Jacobian.

    Sweeps beta on a grid; at each value all inverters sit at the upper
    corner of their box and every disturbance vertex of each block is checked.
    """
    from .validate import NewtonDivergence, hurwitz_check
    from .system import box_bounds

    sys = model.system
    for beta in np.linspace(beta_max / n_grid, beta_max, n_grid):
        lo, hi = model.design_space.box(beta)
        for b in model.blocks():
            sub = sys.subsystem(b)
            idx = [sys.design.index(v) for v in sub.design]
            d_lo, d_hi = box_bounds(sub.disturbance_set, sub.disturbances)
            V = box_vertices(d_lo, d_hi)
            try:
                ok, _ = hurwitz_check(sub, np.repeat(hi[idx][None], len(V), axis=0), V)
            except NewtonDivergence:
                return float(beta)
            if not np.all(ok):
                return float(beta)
    return math.inf


@dataclass
class InverterPolygon:
    bus: str
    variables: list  # (lambda_p name, lambda_q name)
    beta_star: float
    status: str
    vertices: list  # [(lambda_p, lambda_q)] counter-clockwise


def region_polygon(design, beta: float, pair, n_dirs: int = 64) -> list:
    """2-D slice of the design region in ``pair`` with every other variable at its lower bound."""
    idx = [design.variables.index(v) for v in pair]
    others = [j for j in range(len(design.variables)) if j not in idx]
    bounds = [(lo, None) for lo in design.lower_bounds]
    for j in others:
        bounds[j] = (design.lower_bounds[j], design.lower_bounds[j])
    pts = []
    for a in np.linspace(0, 2 * np.pi, n_dirs, endpoint=False):
        c = np.zeros(len(design.variables))
        c[idx[0]], c[idx[1]] = -np.cos(a), -np.sin(a)
        r = linprog(c, A_ub=design.G, b_ub=beta * design.h, bounds=bounds, method="highs")
        if r.status != 0:
            return []
        p = (round(float(r.x[idx[0]]), 12), round(float(r.x[idx[1]]), 12))
        if not pts or p != pts[-1]:
            pts.append(p)
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts.pop()
    seen, out = set(), []
    for p in pts:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def per_inverter_polygons(cell: CellResult, s: AnalysisSettings, rebisect: bool = False) -> list[InverterPolygon]:
    """One 2-D region per inverter, the other inverters pinned at their minimum coefficients.

    The inverter blocks are decoupled, so the pinned inverters do not change
    what is certified for the free one.  By default the polygon is the slice
    of the joint region at the cell's beta*; ``rebisect`` certifies each
    inverter's block on its own, which can only give a larger beta.
    """
    prob, model = cell.problem, cell.model
    out = []
    for inv, states in zip(model.inverters, model.blocks()):
        pair = list(inv.design)
        if cell.status == "empty":
            out.append(InverterPolygon(inv.bus, pair, 0.0, "empty", []))
            continue
        beta, status = cell.beta_star, cell.status
        if rebisect:
            single = RegionProblem(prob.system, prob.design, prob.delta, prob.template, prob.taylor_order,
                                   prob.validation_samples, prob.seed, prob.settings, blocks=[states],
                                   name=f"{prob.name},inverter={inv.bus}")
            try:
                r = bisect_beta(single, s.beta_max, s.tol)
                beta, status = r.beta_star, r.status
            except EmptyRegion:
                out.append(InverterPolygon(inv.bus, pair, 0.0, "empty", []))
                continue
        out.append(InverterPolygon(inv.bus, pair, beta, status, region_polygon(prob.design, beta, pair)))
    return out
