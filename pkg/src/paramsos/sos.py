"""Sum-of-squares programs compiled to SDP.

Unknown polynomials are either *free* (one scalar per basis monomial) or
*SOS* (a PSD Gram matrix over a monomial basis).  Expressions that are affine
in the unknowns are kept as a known polynomial plus, per unknown, the image of
each atom (basis monomial, or Gram entry ``m_r * m_c``) under whatever linear
operations were applied.  That makes derivatives and products with known
polynomials exact without symbolic decision variables.

Positivity on a set ``{k_j >= 0}`` is encoded with Putinar multipliers:
``target - sum_j s_j k_j`` must be SOS, with every ``s_j`` SOS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .polyring import (
    Monomial,
    Polynomial,
    VarId,
    VarSpace,
    grlex_key,
    mono_mul,
    monomial_basis,
)
from .sdp import AffineForm, SdpProblem, SdpSolution, SolverSettings, Status, psd_project, solve

logger = logging.getLogger(__name__)

CERT_TOL = 1e-7

FREE, SOS = "free", "sos"


class DegreeInconsistency(ValueError):
    pass


class UnresolvedUnknown(KeyError):
    pass


class OddDegree(ValueError):
    pass


class ResidualTooLarge(ArithmeticError):
    def __init__(self, residual: float, tol: float):
        super().__init__(f"certificate residual {residual:.3e} exceeds {tol:.1e}")
        self.residual = residual
        self.tol = tol


@dataclass
class SemialgebraicSet:
    """``{z : k_i(z) >= 0 for all i, e_j(z) = 0 for all j}``; empty lists mean the whole space."""

    space: VarSpace
    inequalities: list = field(default_factory=list)
    equalities: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        for p in self.inequalities + self.equalities:
            if p.space != self.space:
                raise ValueError("all constraints of a set must share its VarSpace")

    @classmethod
    def whole_space(cls, space: VarSpace) -> "SemialgebraicSet":
        return cls(space, [], [], name="R^n")

    def is_whole_space(self) -> bool:
        return not self.inequalities and not self.equalities

    def __and__(self, other: "SemialgebraicSet") -> "SemialgebraicSet":
        if other.space != self.space:
            raise ValueError("cannot intersect sets over different spaces")
        name = "&".join(n for n in (self.name, other.name) if n)
        return SemialgebraicSet(
            self.space, self.inequalities + other.inequalities, self.equalities + other.equalities, name
        )

    def var_classes(self) -> set[str]:
        return {self.space.vars[i].cls for p in self.inequalities + self.equalities for i in p.variables()}

    def putinar_generators(self) -> list[Polynomial]:
        """Inequalities, with each equality split into ``e >= 0`` and ``-e >= 0``."""
        out = list(self.inequalities)
        for e in self.equalities:
            out += [e, -e]
        return out

    def contains(self, point, tol: float = 0.0) -> bool:
        return all(p.evaluate(point) >= -tol for p in self.inequalities) and all(
            abs(p.evaluate(point)) <= tol for p in self.equalities
        )


@dataclass
class PolynomialUnknown:
    name: str
    space: VarSpace
    variables: Sequence[str]
    degree: int
    kind: str = FREE
    basis: list = None  # monomials; Gram basis for SOS kind
    min_degree: int = 0

    def __post_init__(self):
        if self.kind not in (FREE, SOS):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.basis is None:
            if self.kind == SOS:
                if self.degree % 2:
                    raise DegreeInconsistency(f"SOS unknown {self.name} needs even degree, got {self.degree}")
                self.basis = monomial_basis(self.space, self.variables, self.degree // 2)
            else:
                self.basis = [
                    m
                    for m in monomial_basis(self.space, self.variables, self.degree)
                    if sum(e for _, e in m) >= self.min_degree
                ]
        if not self.basis:
            raise ValueError(f"unknown {self.name} has an empty basis")

    @property
    def atoms(self) -> list:
        if self.kind == FREE:
            return list(self.basis)
        n = len(self.basis)
        return [(r, c) for r in range(n) for c in range(r, n)]

    def atom_polynomial(self, atom) -> Polynomial:
        if self.kind == FREE:
            return Polynomial.from_monomial(self.space, atom)
        r, c = atom
        return Polynomial.from_monomial(self.space, mono_mul(self.basis[r], self.basis[c]))

    def expr(self) -> "AffineExpr":
        return AffineExpr(self.space.zero(), {self.name: (self, [self.atom_polynomial(a) for a in self.atoms])})

    def value(self, coefficients) -> Polynomial:
        """Polynomial from a coefficient vector (free) or Gram matrix (SOS)."""
        if self.kind == FREE:
            return Polynomial(self.space, {m: float(c) for m, c in zip(self.basis, coefficients)})
        G = np.asarray(coefficients)
        terms: dict = {}
        n = len(self.basis)
        for r in range(n):
            for c in range(n):
                m = mono_mul(self.basis[r], self.basis[c])
                terms[m] = terms.get(m, 0.0) + G[r, c]
        return Polynomial(self.space, terms)


class AffineExpr:
    """``known + sum_U sum_a coeff_{U,a} * image_{U,a}``."""

    def __init__(self, known: Polynomial, parts: dict | None = None):
        self.known = known
        self.parts = parts or {}

    @property
    def space(self):
        return self.known.space

    @classmethod
    def lift(cls, p) -> "AffineExpr":
        if isinstance(p, AffineExpr):
            return p
        return cls(p, {})

    def _combine(self, other, sign: float) -> "AffineExpr":
        if isinstance(other, (int, float)):
            return AffineExpr(self.known + sign * other, dict(self.parts))
        other = AffineExpr.lift(other)
        parts = dict(self.parts)
        for name, (u, imgs) in other.parts.items():
            if name in parts:
                pu, pimgs = parts[name]
                parts[name] = (pu, [a + sign * b for a, b in zip(pimgs, imgs)])
            else:
                parts[name] = (u, [sign * b for b in imgs])
        return AffineExpr(self.known + sign * other.known, parts)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return (-self)._combine(other, 1.0)

    def __neg__(self):
        return self.apply(lambda p: -p)

    def __mul__(self, other):
        if isinstance(other, AffineExpr):
            if other.parts and self.parts:
                raise TypeError("product of two expressions with unknowns is not affine")
            if self.parts:
                return self.apply(lambda p: p * other.known)
            return other.apply(lambda p: p * self.known)
        return self.apply(lambda p: p * other)

    __rmul__ = __mul__

    def apply(self, op: Callable[[Polynomial], Polynomial]) -> "AffineExpr":
        """Apply a linear map of polynomials to the known part and to every image."""
        return AffineExpr(op(self.known), {n: (u, [op(q) for q in imgs]) for n, (u, imgs) in self.parts.items()})

    def differentiate(self, v) -> "AffineExpr":
        return self.apply(lambda p: p.differentiate(v))

    def degree(self) -> int:
        d = self.known.degree()
        for _, imgs in self.parts.values():
            for q in imgs:
                d = max(d, q.degree())
        return d

    def variables(self) -> set[int]:
        vs = set(self.known.variables())
        for _, imgs in self.parts.values():
            for q in imgs:
                vs |= q.variables()
        return vs

    def unknown_names(self) -> list[str]:
        return list(self.parts)

    def value(self, values: dict) -> Polynomial:
        """Evaluate with unknowns replaced by coefficient vectors / Gram matrices."""
        out = self.known
        for name, (u, imgs) in self.parts.items():
            coef = values[name]
            if u.kind == FREE:
                for c, q in zip(coef, imgs):
                    out = out + float(c) * q
            else:
                for (r, c), q in zip(u.atoms, imgs):
                    w = coef[r, c] if r == c else coef[r, c] + coef[c, r]
                    out = out + float(w) * q
        return out


@dataclass
class PutinarConstraint:
    """Assert ``target >= 0`` on ``domain`` via ``target - sum s_j k_j`` SOS."""

    target: AffineExpr
    domain: SemialgebraicSet
    multiplier_degree: int | dict | None = None
    name: str = ""
    multiplier_variables: Sequence[str] | None = None


@dataclass
class CompiledConstraint:
    name: str
    target: AffineExpr
    generators: list
    multipliers: list  # PolynomialUnknown (SOS) per generator
    sigma0: PolynomialUnknown
    degree: int
    monomials: list  # row order


@dataclass
class SosProgram:
    problem: SdpProblem
    unknowns: list
    constraints: list
    block_of: dict  # unknown name -> block index
    free_of: dict  # unknown name -> (offset, count)

    def dimensions(self) -> dict:
        return {
            "blocks": list(self.problem.blocks),
            "n_free": self.problem.n_free,
            "n_constraints": len(self.problem.constraints),
            "n_unknowns": len(self.unknowns),
        }


@dataclass
class SosCertificate:
    gram_blocks: dict
    free_coefficients: dict
    polynomials: dict
    residual_polynomial_norm: float
    constraint_residuals: dict
    min_gram_eigenvalue: float = 0.0

    def polynomial(self, name: str) -> Polynomial:
        return self.polynomials[name]


@dataclass
class Infeasible:
    status: Status
    evidence: SdpSolution | None = None
    reason: str = ""

    def __bool__(self):
        return False


def _even_up(d: int) -> int:
    return d + (d % 2)


def _multiplier_degree(spec, j: int, gen: Polynomial, target_degree: int) -> int:
    if isinstance(spec, dict):
        if j in spec:
            return spec[j]
        spec = spec.get("default")
    if spec is not None:
        return spec
    d = target_degree - gen.degree()
    return max(0, d - (d % 2))


def compile_feasibility(
    constraints: Sequence[PutinarConstraint], unknowns: Sequence[PolynomialUnknown]
) -> SosProgram:
    """Compile Putinar assertions into one SDP feasibility problem."""
    if not constraints:
        raise ValueError("nothing to compile")
    space = constraints[0].target.space
    known = {u.name: u for u in unknowns}
    if len(known) != len(unknowns):
        raise ValueError("duplicate unknown names")
    for u in unknowns:
        if u.kind == SOS and u.degree % 2:
            raise DegreeInconsistency(f"SOS unknown {u.name} has odd degree {u.degree}")

    all_unknowns = list(unknowns)
    compiled: list[CompiledConstraint] = []
    for ci, pc in enumerate(constraints):
        cname = pc.name or f"c{ci}"
        for n in pc.target.unknown_names():
            if n not in known:
                raise UnresolvedUnknown(n)
        tdeg = pc.target.degree()
        if tdeg < 0:
            tdeg = 0
        gens = pc.domain.putinar_generators()
        var_idx = set(pc.target.variables())
        for g in gens:
            var_idx |= g.variables()
        if pc.multiplier_variables is not None:
            mvars = list(pc.multiplier_variables)
        else:
            mvars = [space.vars[i].name for i in sorted(var_idx)]
        total = _even_up(tdeg)
        mults = []
        for j, g in enumerate(gens):
            d = _multiplier_degree(pc.multiplier_degree, j, g, total)
            if d % 2:
                raise DegreeInconsistency(f"{cname}: multiplier {j} degree {d} is odd")
            total = max(total, _even_up(d + g.degree()))
            mults.append(PolynomialUnknown(f"{cname}.s{j + 1}", space, mvars, d, SOS))
        s0vars = [space.vars[i].name for i in sorted(var_idx)] or mvars or [space.vars[0].name]
        sigma0 = PolynomialUnknown(f"{cname}.s0", space, s0vars, total, SOS)
        all_unknowns += mults + [sigma0]
        compiled.append(CompiledConstraint(cname, pc.target, gens, mults, sigma0, total, []))

    blocks, block_of, free_of, n_free = [], {}, {}, 0
    for u in all_unknowns:
        if u.kind == SOS:
            block_of[u.name] = len(blocks)
            blocks.append(len(u.basis))
        else:
            free_of[u.name] = (n_free, len(u.basis))
            n_free += len(u.basis)
    problem = SdpProblem(blocks=blocks, n_free=n_free)

    for cc in compiled:
        rows: dict = {}

        def row(m):
            if m not in rows:
                rows[m] = [AffineForm(), 0.0]
            return rows[m][0]

        def add_unknown(u: PolynomialUnknown, images, sign: float):
            if u.kind == FREE:
                off, _ = free_of[u.name]
                for a, q in enumerate(images):
                    for m, c in q.terms.items():
                        row(m).add_free(off + a, sign * c)
            else:
                k = block_of[u.name]
                for (r, c_), q in zip(u.atoms, images):
                    for m, c in q.terms.items():
                        row(m).add_block(k, r, c_, sign * c)

        for m, c in cc.target.known.terms.items():
            row(m)
            rows[m][1] -= c
        for name, (u, imgs) in cc.target.parts.items():
            add_unknown(u, imgs, 1.0)
        for s, g in zip(cc.multipliers, cc.generators):
            imgs = [s.atom_polynomial(a) * g for a in s.atoms]
            add_unknown(s, imgs, -1.0)
        add_unknown(cc.sigma0, [cc.sigma0.atom_polynomial(a) for a in cc.sigma0.atoms], -1.0)

        cc.monomials = sorted(rows, key=grlex_key)
        for m in cc.monomials:
            form, b = rows[m]
            problem.add_constraint(form, b)

    logger.debug("compiled SOS program: %d blocks, %d free, %d rows", len(blocks), n_free, len(problem.constraints))
    return SosProgram(problem, all_unknowns, compiled, block_of, free_of)


def extract_certificate(
    program: SosProgram, solution: SdpSolution, cert_tol: float = CERT_TOL
) -> SosCertificate:
    """PSD-project the Gram blocks and re-verify every identity symbolically."""
    if solution.status != Status.FEASIBLE:
        raise ValueError(f"cannot extract a certificate from a {solution.status} solution")
    values, grams, frees, polys = {}, {}, {}, {}
    min_eig = np.inf
    for u in program.unknowns:
        if u.kind == SOS:
            G = psd_project(solution.block_values[program.block_of[u.name]])
            min_eig = min(min_eig, float(np.linalg.eigvalsh(G)[0]))
            grams[u.name] = G
            values[u.name] = G
        else:
            off, n = program.free_of[u.name]
            v = np.asarray(solution.free_values[off: off + n], dtype=float)
            frees[u.name] = v
            values[u.name] = v
        polys[u.name] = u.value(values[u.name])

    residuals = {}
    for cc in program.constraints:
        lhs = cc.target.value(values)
        for s, g in zip(cc.multipliers, cc.generators):
            lhs = lhs - polys[s.name] * g
        lhs = lhs - polys[cc.sigma0.name]
        residuals[cc.name] = lhs.max_abs_coeff()
    worst = max(residuals.values(), default=0.0)
    if worst > cert_tol:
        raise ResidualTooLarge(worst, cert_tol)
    return SosCertificate(grams, frees, polys, worst, residuals, float(min_eig if np.isfinite(min_eig) else 0.0))


def solve_program(
    program: SosProgram, settings: SolverSettings | None = None, cert_tol: float = CERT_TOL
) -> SosCertificate | Infeasible:
    sol = solve(program.problem, settings)
    if sol.status != Status.FEASIBLE:
        return Infeasible(sol.status, sol, sol.message)
    try:
        return extract_certificate(program, sol, cert_tol)
    except ResidualTooLarge as exc:
        logger.info("demoting marginal solution: %s", exc)
        return Infeasible(Status.NUMERICAL_FAILURE, sol, str(exc))


def check_sos(
    p: Polynomial, settings: SolverSettings | None = None, cert_tol: float = CERT_TOL
) -> SosCertificate | Infeasible:
    """Decide whether ``p`` is a sum of squares; Gram certificate on success."""
    d = p.degree()
    if d % 2:
        raise OddDegree(f"polynomial of odd degree {d} cannot be SOS")
    dom = SemialgebraicSet.whole_space(p.space)
    prog = compile_feasibility([PutinarConstraint(AffineExpr.lift(p), dom, name="sos")], [])
    return solve_program(prog, settings, cert_tol)


def sos_gram(cert: SosCertificate, constraint_name: str = "sos") -> np.ndarray:
    return cert.gram_blocks[f"{constraint_name}.s0"]
