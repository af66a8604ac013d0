"""Polynomial parametric model of a droop-controlled inverter network.

Per inverter ``i`` the states are scaled deviations

    w_i = omega_i / omega_max,        u_i = (v_i - v_i^d) / dv_max,

so the acceptable-equilibrium ellipse ``(omega/omega_max)^2 +
((v - v^d)/dv_max)^2 <= c`` becomes the ball ``|(w_i, u_i)|^2 <= c``.
Neighbor influence enters through ``delta1 = v_k cos(theta_ik)`` and
``delta2 = v_k sin(theta_ik)``, shifted by their power-flow nominal values so
that the nominal operating point sits at the origin for every droop setting.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import PowerFlowSolution, newton_powerflow
from .network import NetworkSpec
from .polyring import DESIGN, DISTURBANCE, STATE, Polynomial, VarId, VarSpace
from .sos import SemialgebraicSet
from .system import DesignSpace, ParametricSystem

OMEGA_MAX_HZ = 0.7
DV_MAX = 0.2
LAMBDA_MIN = 1e-3
Q_SHARE = 0.2


class ZeroNominalChannel(ValueError):
    pass


@dataclass
class EquilibriumDomain:
    c: float = 1.0
    omega_max: float = 2 * math.pi * OMEGA_MAX_HZ
    dv_max: float = DV_MAX

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not (self.omega_max > 0 and self.dv_max > 0):
            raise ValueError("omega_max and dv_max must be positive")

    @property
    def radius(self) -> float:
        """Excursion bound in scaled coordinates."""
        return math.sqrt(self.c)


@dataclass
class DisturbanceSpec:
    alpha: float
    nominal: dict  # channel name -> nominal value
    absolute: dict = field(default_factory=dict)  # channel name -> half-width

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def channel_bounds(nominal: float, alpha: float, name: str = "", absolute: float | None = None):
    """``(lo, hi)`` for one disturbance channel."""
    if absolute is not None:
        return nominal - absolute, nominal + absolute
    if abs(nominal) < 1e-12:
        raise ZeroNominalChannel(f"channel {name!r} has zero nominal value; give an absolute bound")
    a, b = (1 - alpha) * nominal, (1 + alpha) * nominal
    return min(a, b), max(a, b)


def disturbance_box(spec: DisturbanceSpec, space: VarSpace, shifted: bool = False) -> SemialgebraicSet:
    """Per-channel box ``|(delta - nom)/nom| <= alpha`` as affine inequalities.

    With ``shifted=True`` the variables represent ``delta - nom``.
    """
    ineqs = []
    for name, nom in spec.nominal.items():
        lo, hi = channel_bounds(nom, spec.alpha, name, spec.absolute.get(name))
        if shifted:
            lo, hi = lo - nom, hi - nom
        v = space.var(name)
        ineqs += [v - lo, hi - v]
    return SemialgebraicSet(space, ineqs, [], name=f"box(alpha={spec.alpha:g})")


def design_region(ds: DesignSpace, beta: float, space: VarSpace) -> SemialgebraicSet:
    return ds.region(space, beta)


def default_design_space(n_inverters: int, lam_min: float = LAMBDA_MIN, q_share: float = Q_SHARE,
                         names=None) -> DesignSpace:
    """``lp_i <= beta``, ``lq_i <= q_share * beta``, both ``>= lam_min``."""
    names = names or [f"{p}{i}" for i in range(1, n_inverters + 1) for p in ("lp", "lq")]
    l = len(names)
    h = np.array([1.0, q_share] * n_inverters)
    return DesignSpace(names, np.eye(l), h, np.full(l, lam_min))


def equilibrium_constraint(dom: EquilibriumDomain, omega, v, v_d: float):
    """``c - (omega/omega_max)^2 - ((v - v_d)/dv_max)^2`` (works on numbers and polynomials)."""
    return dom.c - (omega * (1.0 / dom.omega_max)) ** 2 - ((v - v_d) * (1.0 / dom.dv_max)) ** 2


def power_polynomials(space: VarSpace, v: Polynomial, deltas, lines):
    """Transfer injections ``(P, Q)`` with ``delta1 = v_k cos``, ``delta2 = v_k sin``.

    ``deltas`` is a list of ``(delta1, delta2)`` polynomials and ``lines`` the
    matching ``(G_ik, B_ik)`` pairs.
    """
    sp_ = space.zero()
    sq_ = space.zero()
    for (d1, d2), (G, B) in zip(deltas, lines):
        sp_ = sp_ + G * d1 + B * d2
        sq_ = sq_ + G * d2 - B * d1
    return v * sp_, v * sq_


def trig_injections(v_i: float, theta_i: float, neighbors) -> tuple[float, float]:
    """Direct evaluation of the transfer sums; ``neighbors`` is ``[(v_k, theta_k, G, B)]``."""
    P = Q = 0.0
    for v_k, th_k, G, B in neighbors:
        t = theta_i - th_k
        P += v_i * v_k * (G * math.cos(t) + B * math.sin(t))
        Q += v_i * v_k * (G * math.sin(t) - B * math.cos(t))
    return P, Q


def _tag(bus_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]", "_", str(bus_id))


@dataclass
class InverterBlock:
    bus: str
    index: int
    states: tuple  # (w, u)
    design: tuple  # (lp, lq)
    channels: list  # [(neighbor, d1 name, d2 name)]
    tau: float
    v_d: float
    p_d: float
    q_d: float


@dataclass
class MicrogridModel:
    network: NetworkSpec
    powerflow: PowerFlowSolution
    system: ParametricSystem
    design_space: DesignSpace
    disturbance: DisturbanceSpec
    domain: EquilibriumDomain
    inverters: list
    state_radius: float

    @property
    def excursion_bound(self) -> float:
        return self.domain.radius

    def blocks(self) -> list[list[str]]:
        return [list(b.states) for b in self.inverters]

    def unscale(self, x: np.ndarray) -> np.ndarray:
        """Scaled states -> (omega [rad/s], v [p.u.]) per inverter, same layout."""
        out = np.array(x, dtype=float, copy=True)
        for b in self.inverters:
            iw = self.system.states.index(b.states[0])
            iu = self.system.states.index(b.states[1])
            out[..., iw] = x[..., iw] * self.domain.omega_max
            out[..., iu] = b.v_d + x[..., iu] * self.domain.dv_max
        return out


def build_parametric_system(
    net: NetworkSpec,
    alpha: float = 0.0,
    domain: EquilibriumDomain | None = None,
    pf: PowerFlowSolution | None = None,
    state_radius: float = 2.0,
    lam_min: float = LAMBDA_MIN,
    q_share: float = Q_SHARE,
    absolute: dict | None = None,
    couple_channels: bool = False,
) -> MicrogridModel:
    """Polynomial droop dynamics in scaled, shifted coordinates.

    ``state_radius`` sets the state domain ``X = {|(w_i, u_i)| <= state_radius}``
    per inverter.  With ``couple_channels`` the disturbance set additionally
    imposes ``delta1^2 + delta2^2 = v_k^2`` at the nominal ``v_k``.
    """
    domain = domain or EquilibriumDomain()
    pf = pf or newton_powerflow(net)
    wm, dv = domain.omega_max, domain.dv_max

    blocks, varlist, nominal = [], [], {}
    for n, inv in enumerate(net.inverters, start=1):
        chans = []
        for k, G, B in net.neighbors(inv.bus):
            d1, d2 = f"d1_{n}_{_tag(k)}", f"d2_{n}_{_tag(k)}"
            nominal[d1], nominal[d2] = pf.delta_nominal[(inv.bus, k)]
            chans.append((k, d1, d2, G, B))
        v_d = pf.voltage(inv.bus)
        p_d = v_d * sum(G * nominal[d1] + B * nominal[d2] for _, d1, d2, G, B in chans)
        q_d = v_d * sum(G * nominal[d2] - B * nominal[d1] for _, d1, d2, G, B in chans)
        blocks.append(InverterBlock(inv.bus, n, (f"w{n}", f"u{n}"), (f"lp{n}", f"lq{n}"),
                                    chans, inv.tau, v_d, p_d, q_d))
    for b in blocks:
        varlist += [VarId(s, STATE) for s in b.states]
    for b in blocks:
        varlist += [VarId(s, DESIGN) for s in b.design]
    for b in blocks:
        for _, d1, d2, _, _ in b.channels:
            varlist += [VarId(d1, DISTURBANCE), VarId(d2, DISTURBANCE)]
    space = VarSpace(varlist)

    f, x_ineqs = [], []
    for b in blocks:
        w, u = space.vars_of(b.states)
        lp, lq = space.vars_of(b.design)
        v = b.v_d + dv * u
        deltas = [(nominal[d1] + space.var(d1), nominal[d2] + space.var(d2)) for _, d1, d2, _, _ in b.channels]
        P, Q = power_polynomials(space, v, deltas, [(G, B) for *_, G, B in b.channels])
        f.append((-wm * w + lp * (b.p_d - P)) * (1.0 / (b.tau * wm)))
        f.append((-dv * u + lq * (b.q_d - Q)) * (1.0 / (b.tau * dv)))
        x_ineqs.append(state_radius ** 2 - w * w - u * u)

    spec = DisturbanceSpec(alpha, nominal, dict(absolute or {}))
    D = disturbance_box(spec, space, shifted=True)
    if couple_channels:
        eqs = []
        for b in blocks:
            for k, d1, d2, _, _ in b.channels:
                vk = pf.voltage(k)
                e1 = nominal[d1] + space.var(d1)
                e2 = nominal[d2] + space.var(d2)
                eqs.append(e1 * e1 + e2 * e2 - vk * vk)
        D = SemialgebraicSet(space, D.inequalities, eqs, name=D.name + "+coupled")
    X = SemialgebraicSet(space, x_ineqs, [], name=f"ball(r={state_radius:g})")

    states = [s for b in blocks for s in b.states]
    design = [s for b in blocks for s in b.design]
    dist = [d for b in blocks for _, d1, d2, _, _ in b.channels for d in (d1, d2)]
    sys = ParametricSystem(space, states, design, dist, f, X, D, name=net.name or "microgrid",
                           metadata={"alpha": alpha, "c": domain.c})
    ds = default_design_space(len(blocks), lam_min, q_share, names=design)
    return MicrogridModel(net, pf, sys, ds, spec, domain, blocks, state_radius)
