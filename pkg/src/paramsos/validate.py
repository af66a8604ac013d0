"""Empirical checks of certified regions by simulation.

Trajectories are integrated with fixed-step RK4, batched over samples.
Disturbance profiles are generated deterministically from per-sample seeds
derived with splitmix64 from a master seed, so a verdict can be reproduced
from ``(seed, index)`` alone.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .equilibrium import NewtonDivergence, newton_equilibrium
from .polyring import CompiledPolys
from .system import ParametricSystem, box_bounds, box_vertices

logger = logging.getLogger(__name__)

CONSTANT, PIECEWISE, SINUSOID = "constant-at-vertex", "piecewise-constant", "sinusoidal"
KINDS = (CONSTANT, PIECEWISE, SINUSOID)
SIM_TOL = 1e-3
HURWITZ_MARGIN = 1e-9
_MASK = (1 << 64) - 1


class InvalidStep(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def sub_seed(master: int, index: int) -> int:
    """Seed of sample ``index``: two splitmix rounds over (master, index)."""
    return splitmix64(splitmix64(master & _MASK) ^ (index & _MASK))


# -- disturbance profiles -----------------------------------------------------


@dataclass
class DisturbanceProfile:
    """Admissible ``delta(t)`` inside the box ``[lo, hi]``."""

    kind: str
    lo: np.ndarray
    hi: np.ndarray
    seed: int = 0
    dwell: float = 0.5
    horizon: float = 20.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.dwell <= 0:
            raise ValueError("dwell must be positive")
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        rng = np.random.default_rng(self.seed)
        nd = len(self.lo)
        if self.kind == CONSTANT:
            self.vertex = rng.integers(0, 2, size=nd).astype(bool)
        elif self.kind == PIECEWISE:
            pieces = int(np.ceil(self.horizon / self.dwell)) + 2
            # alternate vertices and interior points
            u = rng.uniform(0, 1, size=(pieces, nd))
            corner = rng.integers(0, 2, size=(pieces, nd)).astype(float)
            use_corner = rng.uniform(size=(pieces, 1)) < 0.5
            self.table = np.where(use_corner, corner, u)
        else:
            self.freq = rng.uniform(0.2, 3.0, size=nd)  # rad/s
            self.phase = rng.uniform(0, 2 * np.pi, size=nd)

    def fraction(self, t: np.ndarray) -> np.ndarray:
        """Position inside the box in [0, 1]^nd at times ``t``; shape ``t.shape + (nd,)``."""
        t = np.asarray(t, dtype=float)
        if self.kind == CONSTANT:
            return np.broadcast_to(self.vertex.astype(float), t.shape + self.vertex.shape)
        if self.kind == PIECEWISE:
            k = np.clip((t / self.dwell).astype(int), 0, len(self.table) - 1)
            return self.table[k]
        return 0.5 + 0.5 * np.sin(t[..., None] * self.freq + self.phase)

    def __call__(self, t) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * self.fraction(t)

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "dwell": self.dwell}


class ProfileBatch:
    """Evaluate many profiles at a common time: ``(N, nd)``."""

    def __init__(self, profiles: Sequence[DisturbanceProfile]):
        self.profiles = list(profiles)

    def __call__(self, t: float) -> np.ndarray:
        return np.stack([p(np.asarray(t)) for p in self.profiles])

    def grid(self, times: np.ndarray) -> np.ndarray:
        """``(N, len(times), nd)``"""
        return np.stack([p(times) for p in self.profiles])


# -- integration --------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N, T, n)
    blowup: np.ndarray  # (N,) bool
    error_estimate: np.ndarray | None = None  # (N,) max step-halving difference per unit time

    def final(self) -> np.ndarray:
        return self.states[:, -1]


def rk4(rhs, x0: np.ndarray, t_grid_values, dt: float, steps: int, blowup_norm: float = np.inf):
    """Classical RK4 with fixed step.

    ``t_grid_values(k)`` returns the inputs at half-step index ``k`` (time
    ``k * dt / 2``); ``rhs(x, u)`` is batched.
    """
    x = np.array(x0, dtype=float)
    out = np.empty((x.shape[0], steps + 1, x.shape[1]))
    out[:, 0] = x
    blow = np.zeros(x.shape[0], dtype=bool)
    for s in range(steps):
        u0, uh, u1 = t_grid_values(2 * s), t_grid_values(2 * s + 1), t_grid_values(2 * s + 2)
        k1 = rhs(x, u0)
        k2 = rhs(x + 0.5 * dt * k1, uh)
        k3 = rhs(x + 0.5 * dt * k2, uh)
        k4 = rhs(x + dt * k3, u1)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        bad = ~np.all(np.isfinite(x), axis=1) | (np.linalg.norm(x, axis=1) > blowup_norm)
        if bad.any():
            blow |= bad
            x[bad] = np.nan_to_num(x[bad], nan=0.0, posinf=0.0, neginf=0.0)
            x[bad] = np.clip(x[bad], -blowup_norm, blowup_norm)
        out[:, s + 1] = x
    return out, blow


def simulate(
    sys: ParametricSystem,
    lam: np.ndarray,
    profiles: Sequence[DisturbanceProfile] | DisturbanceProfile,
    x_init: np.ndarray | None = None,
    horizon: float = 20.0,
    dt: float = 0.01,
    blowup_norm: float = np.inf,
    error_estimate: bool = False,
) -> Trajectory:
    """Integrate ``dx/dt = f(x, lam, delta(t))`` for a batch of samples."""
    if not dt > 0 or not horizon > 0:
        raise InvalidStep("dt and horizon must be positive")
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise InvalidStep(f"horizon {horizon} is not a multiple of dt {dt}")
    if isinstance(profiles, DisturbanceProfile):
        profiles = [profiles]
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    N = max(len(profiles), lam.shape[0])
    lam = np.broadcast_to(lam, (N, lam.shape[1]))
    if len(profiles) == 1 and N > 1:
        profiles = list(profiles) * N
    x0 = np.zeros((N, sys.n)) if x_init is None else np.broadcast_to(np.asarray(x_init, dtype=float), (N, sys.n))

    def run(h, n_steps):
        half = np.arange(2 * n_steps + 1) * (h / 2)
        D = ProfileBatch(profiles).grid(half) if sys.disturbances else np.zeros((N, len(half), 0))
        rhs = lambda x, d: sys.rhs(x, lam, d)  # noqa: E731
        return rk4(rhs, x0, lambda k: D[:, k], h, n_steps, blowup_norm)

    states, blow = run(dt, steps)
    est = None
    if error_estimate:
        fine, blow2 = run(dt / 2, 2 * steps)
        diff = np.linalg.norm(states - fine[:, ::2], axis=2)
        est = np.max(diff, axis=1) / horizon
        est[blow | blow2] = np.inf
    return Trajectory(np.arange(steps + 1) * dt, states, blow, est)


def observed_order(f, x0: float, exact, horizon: float, dts=(0.1, 0.05, 0.025)) -> float:
    """Empirical convergence order of :func:`rk4` on a scalar ODE ``dx/dt = f(t, x)``.

    Time enters through the input channel, so the half-step input handling
    of the integrator is exercised as well.
    """
    errs = []
    for h in dts:
        n = int(round(horizon / h))
        out, _ = rk4(lambda x, t: f(t, x), np.array([[x0]], dtype=float),
                     lambda k, h=h: np.full((1, 1), k * h / 2), h, n)
        errs.append(abs(float(out[0, -1, 0]) - exact))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    return float(min(orders))


# -- local stability ----------------------------------------------------------


def spectral_abscissa(J: np.ndarray) -> np.ndarray:
    return np.max(np.linalg.eigvals(J).real, axis=-1)


def hurwitz_check(sys: ParametricSystem, lam, delta, margin: float = HURWITZ_MARGIN, x_init=None):
    """``(is_hurwitz, abscissa)`` of the Jacobian at the Newton equilibrium.

    Batched: ``lam`` and ``delta`` may carry a leading sample axis.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    x, ok = newton_equilibrium(sys, lam, delta, x_init=x_init)
    if not np.all(ok):
        raise NewtonDivergence(f"no equilibrium for {int(np.sum(~ok))} of {len(ok)} points")
    N = max(lam.shape[0], delta.shape[0])
    J = sys.jacobian_at(x, np.broadcast_to(lam, (N, lam.shape[1])), np.broadcast_to(delta, (N, delta.shape[1])))
    a = spectral_abscissa(J)
    res = a < -margin
    if res.shape == (1,):
        return bool(res[0]), float(a[0])
    return res, a


# -- verdicts -----------------------------------------------------------------


@dataclass
class TrajectoryVerdict:
    bounded: bool
    converged: bool
    peak_norm: float
    settle_time: float
    final_error: float
    blowup: bool = False

    @property
    def ok(self) -> bool:
        return self.bounded and self.converged and not self.blowup


@dataclass
class Counterexample:
    index: int
    seed: int
    reason: str
    lam: list
    profile: dict
    delta: list | None = None
    x_init: list | None = None
    detail: dict = field(default_factory=dict)


@dataclass
class MonteCarloReport:
    n_samples: int
    seed: int
    beta: float
    counterexamples: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    n_hurwitz: int = 0
    n_energy: int = 0
    max_abscissa: float = -np.inf
    max_energy_increase: float = -np.inf
    max_final_error: float = -np.inf  # worst trailing error minus the block's Delta
    max_peak: float = 0.0
    max_error_estimate: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    def to_text(self) -> str:
        lines = [
            f"monte_carlo.samples = {self.n_samples}",
            f"monte_carlo.seed = {self.seed}",
            f"monte_carlo.beta = {self.beta!r}",
            f"monte_carlo.hurwitz_checks = {self.n_hurwitz}",
            f"monte_carlo.max_abscissa = {self.max_abscissa!r}",
            f"monte_carlo.energy_checks = {self.n_energy}",
            f"monte_carlo.max_energy_increase = {self.max_energy_increase!r}",
            f"monte_carlo.max_peak_norm = {self.max_peak!r}",
            f"monte_carlo.max_trailing_excess = {self.max_final_error!r}",
            f"monte_carlo.max_step_halving_error = {self.max_error_estimate!r}",
            f"monte_carlo.counterexamples = {len(self.counterexamples)}",
        ]
        for c in self.counterexamples[:20]:
            lines.append(f"  counterexample index={c.index} seed={c.seed} reason={c.reason} lam={c.lam} "
                         f"profile={c.profile}")
        return "\n".join(lines) + "\n"


@dataclass
class CheckSpec:
    """What the Monte Carlo driver needs from a certified result."""

    system: ParametricSystem
    blocks: list  # state-name groups
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    design_contains: object  # callable lam -> bool
    gamma: float  # bound on each block's state norm
    delta: dict  # block index -> excursion bound used for convergence
    psi: dict  # block index -> Polynomial (or None)
    decrease_radius: dict  # block index -> r
    beta: float


def _block_norms(x: np.ndarray, idx_blocks) -> np.ndarray:
    return np.stack([np.linalg.norm(x[..., ix], axis=-1) for ix in idx_blocks], axis=-1)


def _equilibria_on_grid(sys, lam, D):
    """Newton equilibria for each sample at each grid time; D is (N, T, nd)."""
    N, T, nd = D.shape
    lam_r = np.repeat(lam, T, axis=0)
    d_r = D.reshape(N * T, nd)
    x, ok = newton_equilibrium(sys, lam_r, d_r)
    return x.reshape(N, T, sys.n), ok.reshape(N, T)


def _sample(spec: CheckSpec, i: int, seed: int, d_lo, d_hi, dwell: float, horizon: float):
    """The ``i``-th (lam, profile) pair; depends only on ``(seed, i)``."""
    s = sub_seed(seed, i)
    rng = np.random.default_rng(s)
    for _ in range(1000):
        lam = rng.uniform(spec.lam_lo, spec.lam_hi)
        if spec.design_contains(lam):
            break
    return lam, DisturbanceProfile(KINDS[i % len(KINDS)], d_lo, d_hi, seed=s, dwell=dwell, horizon=horizon), s


def replay_sample(spec: CheckSpec, i: int, seed: int, horizon: float = 20.0, dt: float = 0.01,
                  dwell: float = 0.5) -> Trajectory:
    """Re-simulate one Monte Carlo sample, e.g. to dump a counterexample."""
    sys = spec.system
    d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances) if sys.disturbances else (np.zeros(0),) * 2
    lam, prof, _ = _sample(spec, i, seed, d_lo, d_hi, dwell, horizon)
    return simulate(sys, lam[None], [prof], None, horizon, dt, blowup_norm=10 * spec.gamma * len(spec.blocks) ** 0.5)


def _run_chunk(args):
    spec, indices, seed, horizon, dt, dwell, stride, with_energy, error_estimate = args
    sys = spec.system
    idx_blocks = [np.array([sys.states.index(s) for s in b]) for b in spec.blocks]
    d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances) if sys.disturbances else (np.zeros(0),) * 2
    samples = [_sample(spec, i, seed, d_lo, d_hi, dwell, horizon) for i in indices]
    lams = np.array([lam for lam, _, _ in samples])
    profiles = [p for _, p, _ in samples]
    seeds = [s for _, _, s in samples]
    traj = simulate(sys, lams, profiles, None, horizon, dt, blowup_norm=10 * spec.gamma * len(spec.blocks) ** 0.5,
                    error_estimate=error_estimate)
    grid_k = np.arange(0, len(traj.times), stride)
    D = ProfileBatch(profiles).grid(traj.times[grid_k]) if sys.disturbances else np.zeros((len(lams), len(grid_k), 0))
    x0, ok = _equilibria_on_grid(sys, lams, D)
    xs = traj.states[:, grid_k]
    track = _block_norms(xs - x0, idx_blocks)  # (N, G, blocks) distance to the moving equilibrium
    track[~ok] = np.inf
    nominal = _block_norms(xs, idx_blocks)  # distance to the nominal operating point
    peaks = _block_norms(traj.states, idx_blocks).max(axis=1)  # (N, blocks)
    tail = traj.times[grid_k] >= 0.8 * traj.times[-1]
    deltas = np.array([spec.delta[b] for b in range(len(spec.blocks))])
    tail_nom = nominal[:, tail].max(axis=1)  # (N, blocks)
    tail_track = track[:, tail].max(axis=1)

    out = []
    for j, i in enumerate(indices):
        # every profile: limsup |x_b| <= Delta_b; constant profiles must also settle on x0(delta)
        constant = profiles[j].kind == CONSTANT
        inside = np.all(nominal[j] <= deltas + SIM_TOL, axis=1)
        if constant:
            inside &= np.all(track[j] <= SIM_TOL, axis=1)
        bad = np.flatnonzero(~inside)
        if bad.size and bad[-1] == len(inside) - 1:
            settle = float("inf")
        else:
            settle = float(traj.times[grid_k][bad[-1] + 1]) if bad.size else 0.0
        excess = float(np.max(tail_nom[j] - deltas))
        converged = excess <= SIM_TOL
        if constant:
            converged = converged and bool(np.all(tail_track[j] <= SIM_TOL))
        v = TrajectoryVerdict(
            bounded=bool(np.all(peaks[j] <= spec.gamma)),
            converged=bool(converged),
            peak_norm=float(peaks[j].max()),
            settle_time=settle,
            final_error=max(excess, float(np.max(tail_track[j])) if constant else -np.inf),
            blowup=bool(traj.blowup[j]),
        )
        est = float(traj.error_estimate[j]) if traj.error_estimate is not None else 0.0
        out.append((i, seeds[j], lams[j].tolist(), profiles[j].describe(), v, est))
    return out


def energy_check(spec: CheckSpec, seed: int, n: int, horizon: float = 5.0, dt: float = 0.01):
    """Psi non-increasing along constant-delta trajectories outside the decrease radius.

    Initial states are drawn per block on spheres between the decrease
    radius and ``gamma``; only steps whose endpoints both lie outside the
    radius are checked.  Returns ``(max increase, n checked, worst sample)``.
    """
    sys = spec.system
    rng = np.random.default_rng(sub_seed(seed, 10**6))
    idx_blocks = [np.array([sys.states.index(s) for s in b]) for b in spec.blocks]
    d_lo, d_hi = box_bounds(sys.disturbance_set, sys.disturbances) if sys.disturbances else (np.zeros(0),) * 2
    lams, profiles, x_init = [], [], []
    for i in range(n):
        for _ in range(1000):
            lam = rng.uniform(spec.lam_lo, spec.lam_hi)
            if spec.design_contains(lam):
                break
        lams.append(lam)
        profiles.append(DisturbanceProfile(CONSTANT, d_lo, d_hi, seed=int(rng.integers(2**63))))
        x = np.zeros(sys.n)
        for b, ix in enumerate(idx_blocks):
            r0 = spec.decrease_radius[b]
            rad = rng.uniform(r0 + 0.05 * (spec.gamma - r0), spec.gamma)
            v = rng.normal(size=len(ix))
            x[ix] = rad * v / np.linalg.norm(v)
        x_init.append(x)
    lams = np.array(lams)
    traj = simulate(sys, lams, profiles, np.array(x_init), horizon, dt, blowup_norm=1e3)
    worst, worst_i = -np.inf, -1
    for b, ix in enumerate(idx_blocks):
        psi = spec.psi.get(b)
        if psi is None:
            continue
        cp = CompiledPolys([psi])
        N, T, _ = traj.states.shape
        z = sys.point(traj.states.reshape(N * T, sys.n), np.repeat(lams, T, axis=0), None)
        vals = cp(z)[:, 0].reshape(N, T)
        nrm = np.linalg.norm(traj.states[:, :, ix], axis=2)
        outside = (nrm[:, :-1] >= spec.decrease_radius[b]) & (nrm[:, 1:] >= spec.decrease_radius[b])
        inc = np.where(outside, vals[:, 1:] - vals[:, :-1], -np.inf)
        m = inc.max(axis=1)
        if m.max() > worst:
            worst, worst_i = float(m.max()), int(np.argmax(m))
    return worst, n, (lams[worst_i].tolist() if worst_i >= 0 else None)


def vertex_hurwitz(spec: CheckSpec, seed: int, n_lam: int = 20):
    """Jacobians at all disturbance-box vertices (per block) for sampled lam."""
    sys = spec.system
    rng = np.random.default_rng(sub_seed(seed, 2 * 10**6))
    lams = []
    while len(lams) < n_lam:
        lam = rng.uniform(spec.lam_lo, spec.lam_hi)
        if spec.design_contains(lam):
            lams.append(lam)
    lams = np.vstack([spec.lam_lo, spec.lam_hi] + lams) if spec.design_contains(spec.lam_hi) else np.vstack([spec.lam_lo] + lams)
    worst, bad, count = -np.inf, [], 0
    for states in spec.blocks:
        sub = sys.subsystem(list(states))
        lam_idx = [sys.design.index(v) for v in sub.design]
        d_lo, d_hi = box_bounds(sub.disturbance_set, sub.disturbances) if sub.disturbances else (np.zeros(0),) * 2
        V = box_vertices(d_lo, d_hi)
        L = np.repeat(lams[:, lam_idx], len(V), axis=0)
        Dv = np.tile(V, (len(lams), 1))
        try:
            okh, a = hurwitz_check(sub, L, Dv)
        except NewtonDivergence as exc:
            bad.append(("newton", states, str(exc)))
            continue
        okh, a = np.atleast_1d(okh), np.atleast_1d(a)
        count += len(a)
        worst = max(worst, float(a.max()))
        for k in np.flatnonzero(~okh):
            bad.append(("hurwitz", states, L[k].tolist(), Dv[k].tolist(), float(a[k])))
    return worst, count, bad


def monte_carlo_check(
    spec: CheckSpec,
    n_samples: int,
    seed: int = 0,
    horizon: float = 20.0,
    dt: float = 0.01,
    dwell: float = 0.5,
    stride: int = 10,
    jobs: int = 1,
    chunk: int = 50,
    energy_samples: int = 50,
    hurwitz_samples: int = 20,
    error_estimate: bool = False,
) -> MonteCarloReport:
    """Sample ``(lam, delta-profile)`` pairs from the certified region and simulate from ``x(0) = 0``."""
    rep = MonteCarloReport(n_samples, seed, spec.beta)
    if n_samples <= 0:
        return rep
    chunks = [list(range(a, min(a + chunk, n_samples))) for a in range(0, n_samples, chunk)]
    args = [(spec, c, seed, horizon, dt, dwell, stride, False, error_estimate) for c in chunks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_chunk, args))
    else:
        results = [_run_chunk(a) for a in args]
    rows = sorted((r for res in results for r in res), key=lambda r: r[0])
    for i, s, lam, prof, v, est in rows:
        rep.verdicts.append(v)
        rep.max_peak = max(rep.max_peak, v.peak_norm)
        rep.max_final_error = max(rep.max_final_error, v.final_error)
        rep.max_error_estimate = max(rep.max_error_estimate, est)
        if not v.ok:
            reason = "blowup" if v.blowup else ("unbounded" if not v.bounded else "not converged")
            rep.counterexamples.append(Counterexample(i, s, reason, lam, prof,
                                                      detail={"peak": v.peak_norm, "final_error": v.final_error}))
    worst, count, bad = vertex_hurwitz(spec, seed, hurwitz_samples)
    rep.n_hurwitz, rep.max_abscissa = count, worst
    for b in bad:
        rep.counterexamples.append(Counterexample(-1, seed, b[0], list(b[2]) if len(b) > 3 else [], {"kind": "vertex"},
                                                  delta=list(b[3]) if len(b) > 3 else None,
                                                  detail={"block": list(b[1]), "info": b[-1]}))
    if energy_samples and any(p is not None for p in spec.psi.values()):
        inc, n_e, lam_w = energy_check(spec, seed, energy_samples)
        rep.n_energy, rep.max_energy_increase = n_e, inc
        if inc > SIM_TOL:
            rep.counterexamples.append(Counterexample(-1, seed, "energy increase", lam_w or [], {"kind": CONSTANT},
                                                      detail={"increase": inc}))
    return rep


def dump_trajectory(path, traj: Trajectory, index: int, names: Sequence[str]):
    """Write one sample's time series as comma-separated values."""
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + list(names)) + "\n")
        for t, x in zip(traj.times, traj.states[index]):
            fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in x]) + "\n")
