"""Parametric uncertain polynomial systems ``dx/dt = f(x, lam, delta)``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .polyring import CompiledPolys, Polynomial, VarSpace
from .sos import SemialgebraicSet


class NominalConditionViolated(ValueError):
    """``f(0, lam, 0)`` is not identically zero."""


class NegativeBeta(ValueError):
    pass


class UnboundedSet(ValueError):
    pass


@dataclass
class DesignSpace:
    """``{lam : G lam <= beta h, lam >= lower}`` over the named design variables."""

    variables: list
    G: np.ndarray
    h: np.ndarray
    lower_bounds: np.ndarray

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        self.lower_bounds = np.asarray(self.lower_bounds, dtype=float).reshape(-1)
        m, l = self.G.shape
        if l != len(self.variables) or self.h.shape != (m,) or self.lower_bounds.shape != (l,):
            raise ValueError("inconsistent design-space dimensions")
        if np.any(self.h < 0):
            raise ValueError("h must be non-negative")

    def region(self, space: VarSpace, beta: float) -> SemialgebraicSet:
        if beta < 0:
            raise NegativeBeta(f"beta must be >= 0, got {beta}")
        lam = space.vars_of(self.variables)
        ineqs = []
        for g_row, h_i in zip(self.G, self.h):
            p = space.const(beta * h_i)
            for g, v in zip(g_row, lam):
                if g:
                    p = p - g * v
            ineqs.append(p)
        for lo, v in zip(self.lower_bounds, lam):
            ineqs.append(v - lo)
        return SemialgebraicSet(space, ineqs, [], name=f"design(beta={beta:g})")

    def contains(self, lam: np.ndarray, beta: float, tol: float = 1e-12) -> bool:
        lam = np.asarray(lam, dtype=float)
        return bool(np.all(self.G @ lam <= beta * self.h + tol) and np.all(lam >= self.lower_bounds - tol))

    def is_empty(self, beta: float) -> bool:
        res = linprog(
            np.zeros(len(self.variables)),
            A_ub=self.G,
            b_ub=beta * self.h,
            bounds=[(lo, None) for lo in self.lower_bounds],
            method="highs",
        )
        return res.status != 0

    def min_beta(self) -> float:
        """Smallest beta with a non-empty region (``inf`` if none)."""
        l = len(self.variables)
        c = np.zeros(l + 1)
        c[-1] = 1.0
        A = np.hstack([self.G, -self.h[:, None]])
        res = linprog(
            c,
            A_ub=A,
            b_ub=np.zeros(len(self.h)),
            bounds=[(lo, None) for lo in self.lower_bounds] + [(0, None)],
            method="highs",
        )
        return float(res.x[-1]) if res.status == 0 else float("inf")

    def box(self, beta: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-variable bounds of the region via LP (exact for axis-aligned regions)."""
        l = len(self.variables)
        lo, hi = np.empty(l), np.empty(l)
        for j in range(l):
            for sgn, out in ((1.0, lo), (-1.0, hi)):
                c = np.zeros(l)
                c[j] = sgn
                res = linprog(c, A_ub=self.G, b_ub=beta * self.h,
                              bounds=[(b, None) for b in self.lower_bounds], method="highs")
                if res.status != 0:
                    raise UnboundedSet(f"design variable {self.variables[j]} unbounded or region empty")
                out[j] = res.x[j]
        return lo, hi

    def restrict(self, variables: Sequence[str]) -> "DesignSpace":
        """Rows and columns touching only ``variables``."""
        cols = [self.variables.index(v) for v in variables]
        other = [j for j in range(len(self.variables)) if j not in cols]
        rows = [i for i in range(self.G.shape[0]) if not np.any(self.G[i, other])]
        return DesignSpace(list(variables), self.G[np.ix_(rows, cols)], self.h[rows], self.lower_bounds[cols])


@dataclass
class ParametricSystem:
    space: VarSpace
    states: list
    design: list
    disturbances: list
    f: list
    state_domain: SemialgebraicSet
    disturbance_set: SemialgebraicSet
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.f) != len(self.states):
            raise ValueError("one vector-field component per state required")
        self._compiled = None
        self._jac = None

    @property
    def n(self) -> int:
        return len(self.states)

    # symbolic ----------------------------------------------------------------

    def jacobian(self) -> list:
        if self._jac is None:
            self._jac = [[fi.differentiate(x) for x in self.states] for fi in self.f]
        return self._jac

    def check_nominal(self):
        zero = {v: 0.0 for v in self.states + self.disturbances}
        for i, fi in enumerate(self.f):
            r = fi.substitute(zero)
            if not r.is_zero():
                raise NominalConditionViolated(f"f[{i}](0, lam, 0) = {r}")

    # numeric -----------------------------------------------------------------

    def _idx(self, names):
        return np.array([self.space.index(v) for v in names], dtype=int)

    def point(self, x=None, lam=None, d=None) -> np.ndarray:
        """Dense point(s) in space order; batch dimensions broadcast."""
        parts = [np.asarray(a, dtype=float) for a in (x, lam, d) if a is not None]
        batch = np.broadcast_shapes(*[p.shape[:-1] for p in parts]) if parts else ()
        z = np.zeros(batch + (len(self.space),))
        for names, a in ((self.states, x), (self.design, lam), (self.disturbances, d)):
            if a is not None and len(names):
                z[..., self._idx(names)] = a
        return z

    def rhs(self, x, lam, d) -> np.ndarray:
        if self._compiled is None:
            self._compiled = CompiledPolys(self.f)
        return self._compiled(self.point(x, lam, d))

    def jacobian_at(self, x, lam, d) -> np.ndarray:
        if not hasattr(self, "_cjac") or self._cjac is None:
            self._cjac = CompiledPolys([p for row in self.jacobian() for p in row])
        out = self._cjac(self.point(x, lam, d))
        return out.reshape(out.shape[:-1] + (self.n, self.n))

    # structure ---------------------------------------------------------------

    def split(self, design_space: DesignSpace | None = None) -> list[list[str]]:
        """Groups of variables that never interact (dynamics or domain constraints).

        Each group is returned as the list of its state names, in state order.
        """
        names = self.states + self.design + self.disturbances
        parent = {v: v for v in names}

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        def union_all(vs):
            vs = [v for v in vs if v in parent]
            for a, b in zip(vs, vs[1:]):
                parent[find(a)] = find(b)

        sp = self.space
        for x, fi in zip(self.states, self.f):
            union_all([x] + [sp.vars[i].name for i in fi.variables()])
        for p in self.state_domain.putinar_generators() + self.disturbance_set.putinar_generators():
            union_all([sp.vars[i].name for i in p.variables()])
        if design_space is not None:
            for row in design_space.G:
                union_all([v for g, v in zip(row, design_space.variables) if g])
        groups: dict = {}
        for x in self.states:
            groups.setdefault(find(x), []).append(x)
        return list(groups.values())

    def subsystem(self, states: Sequence[str], name: str = "") -> "ParametricSystem":
        """Restriction to ``states`` and the parameters they touch."""
        sp = self.space
        idx = [self.states.index(s) for s in states]
        f = [self.f[i] for i in idx]
        used = set()
        for fi in f:
            used |= {sp.vars[i].name for i in fi.variables()}

        def keep(p):
            return {sp.vars[i].name for i in p.variables()} <= set(states) | used | set(self.design) | set(self.disturbances)

        X = SemialgebraicSet(sp, [p for p in self.state_domain.inequalities
                                  if {sp.vars[i].name for i in p.variables()} <= set(states)],
                             [p for p in self.state_domain.equalities
                              if {sp.vars[i].name for i in p.variables()} <= set(states)], name=self.state_domain.name)
        dist = [d for d in self.disturbances if d in used]
        D = SemialgebraicSet(sp, [p for p in self.disturbance_set.inequalities
                                  if {sp.vars[i].name for i in p.variables()} <= set(dist)],
                             [p for p in self.disturbance_set.equalities
                              if {sp.vars[i].name for i in p.variables()} <= set(dist)], name=self.disturbance_set.name)
        design = [v for v in self.design if v in used]
        return ParametricSystem(sp, list(states), design, dist, f, X, D, name=name or self.name,
                                metadata=dict(self.metadata))


# -- sampling of box-like semialgebraic sets ---------------------------------


def box_bounds(S: SemialgebraicSet, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Bounds implied by single-variable affine constraints of ``S``."""
    sp = S.space
    lo = np.full(len(names), -np.inf)
    hi = np.full(len(names), np.inf)
    pos = {sp.index(n): j for j, n in enumerate(names)}
    for p in S.putinar_generators():
        vs = p.variables()
        if len(vs) != 1 or p.degree() != 1:
            continue
        (i,) = vs
        if i not in pos:
            continue
        a = p.coefficient(((i, 1),))
        b = p.constant_term()
        j = pos[i]
        if a > 0:
            lo[j] = max(lo[j], -b / a)
        else:
            hi[j] = min(hi[j], -b / a)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise UnboundedSet(f"no finite box for {list(names)} in set {S.name!r}")
    return lo, hi


def box_vertices(lo: np.ndarray, hi: np.ndarray, limit: int = 4096) -> np.ndarray:
    n = len(lo)
    if n == 0:
        return np.zeros((1, 0))
    if 2 ** n > limit:
        raise ValueError("too many vertices")
    return np.array([[h if b else l for b, l, h in zip(bits, lo, hi)]
                     for bits in itertools.product((0, 1), repeat=n)])


def sample_box(lo, hi, n: int, rng: np.random.Generator, vertices: bool = True) -> np.ndarray:
    pts = rng.uniform(lo, hi, size=(n, len(lo)))
    if vertices and len(lo) <= 12:
        pts = np.vstack([box_vertices(lo, hi), pts])
    return pts
