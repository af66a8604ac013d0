"""Sparse multivariate polynomials over named variables.

Polynomials are immutable maps from monomials to real coefficients.  A
monomial is a tuple of ``(variable index, exponent)`` pairs sorted by index
with zero exponents omitted, so the empty tuple is the constant monomial.

All polynomials carry a :class:`VarSpace`; arithmetic between polynomials of
different spaces raises :class:`VarSpaceMismatch`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence

import numpy as np

#: Coefficients with magnitude below this are treated as exact zeros.  This is
#: the only place zero decisions are made.
DROP_TOL = 1e-14

STATE, DESIGN, DISTURBANCE, AUXILIARY = "state", "design", "disturbance", "auxiliary"
VAR_CLASSES = (STATE, DESIGN, DISTURBANCE, AUXILIARY)

Monomial = tuple  # tuple[tuple[int, int], ...]


class VarSpaceMismatch(ValueError):
    pass


class UnknownVariable(KeyError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class VarId:
    name: str
    cls: str = STATE

    def __post_init__(self):
        if self.cls not in VAR_CLASSES:
            raise ValueError(f"unknown variable class {self.cls!r}")
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", self.name):
            raise ValueError(f"invalid variable name {self.name!r}")


class VarSpace:
    """An ordered collection of uniquely named variables."""

    def __init__(self, variables: Iterable[VarId | tuple[str, str] | str]):
        vs = []
        for v in variables:
            if isinstance(v, str):
                v = VarId(v)
            elif not isinstance(v, VarId):
                v = VarId(*v)
            vs.append(v)
        self.vars: tuple[VarId, ...] = tuple(vs)
        self._index = {v.name: i for i, v in enumerate(self.vars)}
        if len(self._index) != len(self.vars):
            raise ValueError("variable names must be unique within a VarSpace")

    def __len__(self):
        return len(self.vars)

    def __eq__(self, other):
        return isinstance(other, VarSpace) and self.vars == other.vars

    def __hash__(self):
        return hash(self.vars)

    def __repr__(self):
        return f"VarSpace({[v.name for v in self.vars]})"

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.vars]

    def index(self, v: VarId | str) -> int:
        name = v.name if isinstance(v, VarId) else v
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVariable(name) from None

    def of_class(self, cls: str) -> list[VarId]:
        return [v for v in self.vars if v.cls == cls]

    def var(self, v: VarId | str) -> "Polynomial":
        return Polynomial(self, {((self.index(v), 1),): 1.0})

    def vars_of(self, names: Iterable[VarId | str]) -> list["Polynomial"]:
        return [self.var(n) for n in names]

    def const(self, c: float) -> "Polynomial":
        return Polynomial(self, {(): float(c)})

    def zero(self) -> "Polynomial":
        return Polynomial(self, {})


# -- monomial helpers -------------------------------------------------------


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for i, e in b:
        d[i] = d.get(i, 0) + e
    return tuple(sorted(d.items()))


def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_degree_in(m: Monomial, indices: frozenset | set) -> int:
    return sum(e for i, e in m if i in indices)


def grlex_key(m: Monomial):
    """Ascending graded order; within a degree, earlier variables first."""
    return (mono_degree(m), tuple((i, -e) for i, e in m))


def monomial_basis(space: VarSpace, variables: Sequence[VarId | str], max_degree: int) -> list[Monomial]:
    """All monomials in ``variables`` of total degree <= ``max_degree``, graded-lex order."""
    if max_degree < 0:
        raise ValueError("max_degree must be non-negative")
    idx = sorted(space.index(v) for v in variables)
    out: list[Monomial] = []
    for d in range(max_degree + 1):
        for combo in combinations_with_replacement(idx, d):
            counts: dict[int, int] = {}
            for i in combo:
                counts[i] = counts.get(i, 0) + 1
            out.append(tuple(sorted(counts.items())))
    out.sort(key=grlex_key)
    return out


# -- polynomial --------------------------------------------------------------


def _clean(terms: Mapping[Monomial, float]) -> dict:
    return {m: float(c) for m, c in terms.items() if abs(c) >= DROP_TOL}


class Polynomial:
    __slots__ = ("space", "terms", "_hash")

    def __init__(self, space: VarSpace, terms: Mapping[Monomial, float] | None = None):
        self.space = space
        self.terms: dict = _clean(terms or {})
        self._hash = None

    # construction -----------------------------------------------------------

    @classmethod
    def from_monomial(cls, space: VarSpace, m: Monomial, c: float = 1.0) -> "Polynomial":
        return cls(space, {m: c})

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.space is not self.space and other.space != self.space:
                raise VarSpaceMismatch(f"{self.space!r} vs {other.space!r}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial(self.space, {(): float(other)})
        return NotImplemented

    # arithmetic ---------------------------------------------------------------

    def __add__(self, other):
        q = self._coerce(other)
        if q is NotImplemented:
            return q
        out = dict(self.terms)
        for m, c in q.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.space, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        q = self._coerce(other)
        if q is NotImplemented:
            return q
        return self + (-q)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        q = self._coerce(other)
        if q is NotImplemented:
            return q
        out: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in q.terms.items():
                m = mono_mul(m1, m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(self.space, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self * (1.0 / float(other))
        return NotImplemented

    def __pow__(self, n: int):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("only non-negative integer powers")
        result = self.space.const(1.0)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    # comparison ---------------------------------------------------------------

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = self.space.const(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space == other.space and self.terms == other.terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.space, frozenset(self.terms.items())))
        return self._hash

    def allclose(self, other: "Polynomial", tol: float = 1e-12) -> bool:
        return (self - other).max_abs_coeff() <= tol

    # queries ------------------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((mono_degree(m) for m in self.terms), default=-1)

    def degree_in(self, variables: Iterable[VarId | str]) -> int:
        idx = frozenset(self.space.index(v) for v in variables)
        return max((mono_degree_in(m, idx) for m in self.terms), default=-1)

    def variables(self) -> set[int]:
        return {i for m in self.terms for i, _ in m}

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(m, 0.0)

    def constant_term(self) -> float:
        return self.terms.get((), 0.0)

    # calculus / composition ----------------------------------------------------

    def differentiate(self, v: VarId | str) -> "Polynomial":
        k = self.space.index(v)
        out: dict = {}
        for m, c in self.terms.items():
            for j, (i, e) in enumerate(m):
                if i == k:
                    nm = m[:j] + (((i, e - 1),) if e > 1 else ()) + m[j + 1:]
                    out[nm] = out.get(nm, 0.0) + c * e
                    break
        return Polynomial(self.space, out)

    def gradient(self, variables: Sequence[VarId | str]) -> list["Polynomial"]:
        return [self.differentiate(v) for v in variables]

    def substitute(self, bindings: Mapping[VarId | str, "Polynomial | float"]) -> "Polynomial":
        """Simultaneous substitution of variables by polynomials or numbers."""
        table = {}
        for v, p in bindings.items():
            q = self._coerce(p)
            if q is NotImplemented:
                raise TypeError(f"cannot bind {v!r} to {type(p).__name__}")
            table[self.space.index(v)] = q
        powers: dict = {}

        def power(i, e):
            key = (i, e)
            if key not in powers:
                powers[key] = table[i] ** e
            return powers[key]

        out = self.space.zero()
        acc: dict = {}
        for m, c in self.terms.items():
            kept = tuple((i, e) for i, e in m if i not in table)
            sub = [(i, e) for i, e in m if i in table]
            if not sub:
                acc[kept] = acc.get(kept, 0.0) + c
                continue
            term = Polynomial(self.space, {kept: c})
            for i, e in sub:
                term = term * power(i, e)
            out = out + term
        return out + Polynomial(self.space, acc)

    def evaluate(self, point: Mapping[VarId | str, float] | Sequence[float] | np.ndarray) -> float:
        """Evaluate at a full point (mapping by name or dense vector in space order)."""
        x = self._dense_point(point)
        total = 0.0
        for m, c in self.terms.items():
            t = c
            for i, e in m:
                t *= x[i] ** e
            total += t
        return float(total)

    def _dense_point(self, point) -> np.ndarray:
        if isinstance(point, Mapping):
            x = np.full(len(self.space), np.nan)
            for k, val in point.items():
                x[self.space.index(k)] = val
            return x
        x = np.asarray(point, dtype=float)
        if x.shape != (len(self.space),):
            raise ValueError(f"expected point of length {len(self.space)}")
        return x

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        """Terms in descending graded-lex order (serialization order)."""
        return sorted(self.terms.items(), key=lambda t: (-mono_degree(t[0]), grlex_key(t[0])))

    # text form ------------------------------------------------------------------

    def __str__(self):
        return to_text(self)

    def __repr__(self):
        return f"Polynomial({to_text(self)!r})"


# -- batch evaluation ----------------------------------------------------------


class CompiledPolys:
    """Vectorized evaluator for a list of polynomials sharing one space.

    ``__call__`` takes an array of shape ``(..., nvars)`` and returns
    ``(..., len(polys))``.
    """

    def __init__(self, polys: Sequence[Polynomial]):
        if not polys:
            raise ValueError("need at least one polynomial")
        self.space = polys[0].space
        monos = sorted({m for p in polys for m in p.terms}, key=grlex_key)
        self.nvars = len(self.space)
        self.exponents = np.zeros((len(monos), self.nvars), dtype=np.int64)
        for r, m in enumerate(monos):
            for i, e in m:
                self.exponents[r, i] = e
        col = {m: r for r, m in enumerate(monos)}
        self.coeffs = np.zeros((len(monos), len(polys)))
        for j, p in enumerate(polys):
            if p.space != self.space:
                raise VarSpaceMismatch("all polynomials must share one space")
            for m, c in p.terms.items():
                self.coeffs[col[m], j] = c
        self.used = np.flatnonzero(self.exponents.any(axis=0))
        self.maxexp = int(self.exponents.max(initial=0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        flat = x.reshape(-1, self.nvars)
        mon = np.ones((flat.shape[0], self.exponents.shape[0]))
        for i in self.used:
            e = self.exponents[:, i]
            # power table: column k holds x_i**k
            pw = flat[:, i:i + 1] ** np.arange(self.maxexp + 1)
            mon *= pw[:, e]
        out = mon @ self.coeffs
        return out.reshape(*shape, self.coeffs.shape[1])


# -- serialization ---------------------------------------------------------------


def _fmt_coeff(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(c)


def to_text(p: Polynomial) -> str:
    """Human-readable normal form, e.g. ``3*x^2*y - 1.5*v + 1``."""
    if p.is_zero():
        return "0"
    parts = []
    for k, (m, c) in enumerate(p.sorted_terms()):
        sign = "-" if c < 0 else "+"
        a = abs(c)
        factors = [
            p.space.vars[i].name + (f"^{e}" if e > 1 else "") for i, e in m
        ]
        if not factors:
            body = _fmt_coeff(a)
        elif a == 1.0:
            body = "*".join(factors)
        else:
            body = "*".join([_fmt_coeff(a)] + factors)
        if k == 0:
            parts.append(("-" if sign == "-" else "") + body)
        else:
            parts.append(f" {sign} {body}")
    return "".join(parts)


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*^]))"
)


def _tokens(text: str) -> list[tuple[str, str]]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        mt = _TOKEN_RE.match(text, pos)
        if not mt:
            raise ParseError(f"unexpected character at {pos} in {text!r}")
        kind = mt.lastgroup
        out.append((kind, mt.group(kind)))
        pos = mt.end()
    return out


def parse(text: str, space: VarSpace) -> Polynomial:
    """Parse the normal form produced by :func:`to_text`."""
    toks = _tokens(text)
    if not toks:
        raise ParseError("empty polynomial text")
    terms: dict = {}
    k = 0
    while k < len(toks):
        sign = 1.0
        if toks[k] == ("op", "-") or toks[k] == ("op", "+"):
            sign = -1.0 if toks[k][1] == "-" else 1.0
            k += 1
        elif k > 0:
            raise ParseError(f"expected + or - in {text!r}")
        coeff, mono = sign, {}
        while True:
            if k >= len(toks):
                raise ParseError(f"dangling operator in {text!r}")
            kind, val = toks[k]
            if kind == "num":
                coeff *= float(val)
                k += 1
            elif kind == "name":
                try:
                    i = space.index(val)
                except UnknownVariable:
                    raise ParseError(f"unknown variable {val!r}") from None
                k += 1
                e = 1
                if k < len(toks) and toks[k] == ("op", "^"):
                    if k + 1 >= len(toks) or toks[k + 1][0] != "num" or not toks[k + 1][1].isdigit():
                        raise ParseError(f"bad exponent in {text!r}")
                    e = int(toks[k + 1][1])
                    k += 2
                mono[i] = mono.get(i, 0) + e
            else:
                raise ParseError(f"unexpected {val!r} in {text!r}")
            if k < len(toks) and toks[k] == ("op", "*"):
                k += 1
                continue
            break
        m = tuple(sorted((i, e) for i, e in mono.items() if e))
        terms[m] = terms.get(m, 0.0) + coeff
    return Polynomial(space, terms)


def dot(ps: Sequence[Polynomial], qs: Sequence[Polynomial]) -> Polynomial:
    if len(ps) != len(qs) or not ps:
        raise ValueError("length mismatch")
    acc = ps[0] * qs[0]
    for p, q in zip(ps[1:], qs[1:]):
        acc = acc + p * q
    return acc


def sum_squares(ps: Sequence[Polynomial]) -> Polynomial:
    return dot(ps, ps)


def n_monomials(n: int, d: int) -> int:
    return math.comb(n + d, d)
