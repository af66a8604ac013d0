"""Level-set quantities that turn a Lyapunov certificate into trajectory bounds.

All quantities are estimated by dense sampling along rays followed by a
bisection refinement on each ray.  Each estimate is pushed in the
conservative direction: sets that must be contained are measured by their
worst ray, level values that must dominate are taken as sample maxima.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .equilibrium import newton_equilibrium
from .polyring import CompiledPolys, Polynomial
from .sos import SemialgebraicSet
from .system import ParametricSystem, box_bounds, box_vertices


def directions(n: int, count: int = 256, seed: int = 0) -> np.ndarray:
    """Unit directions: both signs in 1-D, an even fan in 2-D, random otherwise."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        a = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    v = np.random.default_rng(seed).normal(size=(count, n))
    v = np.vstack([np.eye(n), -np.eye(n), v])
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def ray_exit(inside: Callable[[np.ndarray], np.ndarray], center: np.ndarray, dirs: np.ndarray,
             t_max: float, n_grid: int = 200, refine: int = 40) -> np.ndarray:
    """Distance along each ray to the first point where ``inside`` fails.

    ``inside`` maps ``(..., n)`` points to booleans.  Rays that never leave
    within ``t_max`` report ``t_max``.
    """
    ts = np.linspace(0, t_max, n_grid + 1)[1:]
    pts = center + ts[None, :, None] * dirs[:, None, :]
    ok = inside(pts)
    first_bad = np.where(~ok, np.arange(n_grid)[None, :], n_grid).min(axis=1)
    lo = np.where(first_bad > 0, ts[np.maximum(first_bad - 1, 0)], 0.0)
    hi = np.where(first_bad < n_grid, ts[np.minimum(first_bad, n_grid - 1)], t_max)
    hit = first_bad < n_grid
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        okm = inside(center + mid[:, None] * dirs)
        lo = np.where(hit & okm, mid, lo)
        hi = np.where(hit & ~okm, mid, hi)
    return np.where(hit, lo, t_max)


@dataclass
class BoundsReport:
    Gamma: float
    Gamma_Psi: float
    zeta_star: float
    nu_star: float
    mu_star: float
    kappa: float
    Delta: float
    xi: float
    rho_star_upper: float
    rho_star_lower: float
    mu: float
    epsilon: float
    sufficiency: dict = field(default_factory=dict)

    def T_estimate(self, mu: float | None = None, eps: float | None = None) -> float:
        """``(rho* - rho_*) / kappa``; defaults to the report's own (mu, eps)."""
        if (mu is None or mu == self.mu) and (eps is None or eps == self.epsilon):
            if self.kappa <= 0:
                return float("inf")
            return (self.rho_star_upper - self.rho_star_lower) / self.kappa
        raise ValueError("recompute the report for other (mu, eps)")

    @property
    def guaranteed(self) -> bool:
        return all(self.sufficiency.values())

    def to_text(self, prefix: str = "") -> str:
        keys = ["Gamma", "Gamma_Psi", "zeta_star", "nu_star", "mu_star", "kappa", "Delta", "xi",
                "rho_star_upper", "rho_star_lower", "mu", "epsilon"]
        lines = [f"{prefix}{k} = {getattr(self, k)!r}" for k in keys]
        lines.append(f"{prefix}T = {self.T_estimate()!r}")
        lines += [f"{prefix}sufficiency.{k} = {str(v).lower()}" for k, v in self.sufficiency.items()]
        return "\n".join(lines) + "\n"


def bounds_report(
    psi: Polynomial,
    sys: ParametricSystem,
    lam_points: np.ndarray,
    delta: float,
    eps2: float = 1e-4,
    n_dist: int = 16,
    seed: int = 0,
    n_dirs: int = 256,
) -> BoundsReport:
    """Estimate the level-set quantities for a certificate ``psi``.

    ``lam_points`` are design points to evaluate at (e.g. region vertices);
    the report keeps the worst value over them.  ``delta`` is the
    equilibrium excursion bound.  Equilibria ``x0(lam, d)`` are Newton
    solutions at disturbance-box vertices and random interior points.
    """
    n = sys.n
    sp = sys.space
    dirs = directions(n, n_dirs, seed)
    lam_points = np.atleast_2d(np.asarray(lam_points, dtype=float))
    X = sys.state_domain
    gens = CompiledPolys(X.putinar_generators()) if X.putinar_generators() else None
    cpsi = CompiledPolys([psi])
    x_idx = np.array([sp.index(s) for s in sys.states])

    def in_X(pts):
        if gens is None:
            return np.ones(pts.shape[:-1], dtype=bool)
        z = np.zeros(pts.shape[:-1] + (len(sp),))
        z[..., x_idx] = pts
        return np.all(gens(z) >= 0, axis=-1)

    def psi_at(pts, lam):
        z = sys.point(pts, np.broadcast_to(lam, pts.shape[:-1] + lam.shape[-1:]), None)
        return cpsi(z)[..., 0]

    origin = np.zeros(n)
    t_big = 10.0 * max(1.0, delta)
    # bounded domain: grow until some ray exits
    while True:
        g = ray_exit(in_X, origin, dirs, t_big)
        if np.any(g < t_big) or t_big > 1e6:
            break
        t_big *= 10
    Gamma = float(g.min())

    if sys.disturbances:
        d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances)
        rng = np.random.default_rng(seed)
        D = np.vstack([box_vertices(d_lo, d_hi) if len(d_lo) <= 10 else np.empty((0, len(d_lo))),
                       rng.uniform(d_lo, d_hi, size=(n_dist, len(d_lo)))])
    else:
        D = np.zeros((1, 0))

    worst = dict(Gamma_Psi=np.inf, zeta=0.0, nu=0.0, mu=np.inf, kappa=np.inf, xi=np.inf, rho_up=0.0, rho_lo=np.inf)
    radial = np.linspace(0, 1, 21)[1:]
    for lam in lam_points:
        x0, ok = newton_equilibrium(sys, np.broadcast_to(lam, (len(D), len(lam))), D)
        x0 = x0[ok] if np.any(ok) else np.zeros((1, n))
        # Gamma_Psi: lowest Psi on or outside the boundary of X (sampled along rays)
        far = g[:, None, None] * (1 + radial[None, :, None]) * dirs[:, None, :]
        edge = g[:, None] * dirs
        Gamma_Psi = float(min(psi_at(edge, lam).min(), psi_at(far, lam).min()))
        # zeta*: max Psi over balls of radius Delta around every x0
        ball = x0[:, None, None, :] + delta * radial[None, None, :, None] * dirs[None, :, None, :]
        zeta = float(psi_at(ball, lam).max())
        # nu*: furthest reach of {Psi <= zeta} from any x0
        inside_zeta = lambda pts: psi_at(pts, lam) <= zeta  # noqa: E731
        c = x0.mean(axis=0)
        reach = ray_exit(inside_zeta, c, dirs, t_big)
        boundary = c + reach[:, None] * dirs
        nu = float(np.max(np.linalg.norm(boundary[None, :, :] - x0[:, None, :], axis=2)))
        # mu*: largest ball around every x0 inside {Psi <= Gamma_Psi}
        inside_G = lambda pts: psi_at(pts, lam) <= Gamma_Psi  # noqa: E731
        mu_star = min(float(ray_exit(inside_G, x, dirs, t_big).min()) for x in x0)
        # rho*, rho_* at the representative mu = Delta, eps = (Gamma - Delta) / 2
        mu_rep, eps_rep = delta, max((Gamma - delta) / 2, 1e-6)
        shell = x0[:, None, None, :] + (mu_rep + delta) * radial[None, None, :, None] * dirs[None, :, None, :]
        rho_up = float(psi_at(shell, lam).max())
        sphere = x0[:, None, :] + eps_rep * dirs[None, :, :]
        outside = x0[:, None, None, :] + eps_rep * (1 + 2 * radial[None, None, :, None]) * dirs[None, :, None, :]
        rho_lo = float(min(psi_at(sphere, lam).min(), psi_at(outside, lam).min()))
        # kappa: min eps2 |x - x0|^2 over Psi in [rho_lo, rho_up]
        cloud = x0[:, None, None, :] + t_big * radial[None, None, :, None] * dirs[None, :, None, :]
        vals = psi_at(cloud, lam)
        dist2 = np.sum((cloud - x0[:, None, None, :]) ** 2, axis=-1)
        band = (vals >= rho_lo) & (vals <= rho_up)
        kappa = float(eps2 * dist2[band].min()) if np.any(band) else 0.0
        # xi: ball around the origin inside {Psi <= zeta_nu}, zeta_nu the level
        # that keeps |x - x0| <= Gamma - Delta
        lim = max(Gamma - delta, 0.0)
        ring = x0[:, None, :] + lim * dirs[None, :, :]
        zeta_nu = float(psi_at(ring, lam).min()) if lim > 0 else zeta
        inside_nu = lambda pts: psi_at(pts, lam) <= zeta_nu  # noqa: E731
        xi = float(ray_exit(inside_nu, origin, dirs, t_big).min()) if psi_at(origin[None], lam)[0] <= zeta_nu else 0.0

        worst["Gamma_Psi"] = min(worst["Gamma_Psi"], Gamma_Psi)
        worst["zeta"] = max(worst["zeta"], zeta)
        worst["nu"] = max(worst["nu"], nu)
        worst["mu"] = min(worst["mu"], mu_star)
        worst["kappa"] = min(worst["kappa"], kappa)
        worst["xi"] = min(worst["xi"], xi)
        worst["rho_up"] = max(worst["rho_up"], rho_up)
        worst["rho_lo"] = min(worst["rho_lo"], rho_lo)

    suff = {
        "delta_below_gamma_minus_nu": delta < Gamma - worst["nu"],
        "delta_below_half_mu": delta < worst["mu"] / 2,
        "zeta_below_gamma_psi": worst["zeta"] < worst["Gamma_Psi"],
    }
    return BoundsReport(
        Gamma=Gamma,
        Gamma_Psi=float(worst["Gamma_Psi"]),
        zeta_star=float(worst["zeta"]),
        nu_star=float(worst["nu"]),
        mu_star=float(worst["mu"]),
        kappa=float(worst["kappa"]),
        Delta=float(delta),
        xi=float(worst["xi"]),
        rho_star_upper=float(worst["rho_up"]),
        rho_star_lower=float(worst["rho_lo"]),
        mu=float(delta),
        epsilon=float(max((Gamma - delta) / 2, 1e-6)),
        sufficiency=suff,
    )


def largest_state_ball(X: SemialgebraicSet, states, n_dirs: int = 256) -> float:
    """Gamma alone: radius of the largest origin-centered ball inside ``X``."""
    sp = X.space
    gens = X.putinar_generators()
    if not gens:
        return float("inf")
    cg = CompiledPolys(gens)
    idx = np.array([sp.index(s) for s in states])

    def inside(pts):
        z = np.zeros(pts.shape[:-1] + (len(sp),))
        z[..., idx] = pts
        return np.all(cg(z) >= 0, axis=-1)

    dirs = directions(len(states), n_dirs)
    t = 10.0
    while True:
        g = ray_exit(inside, np.zeros(len(states)), dirs, t)
        if np.any(g < t) or t > 1e6:
            return float(g.min())
        t *= 10
