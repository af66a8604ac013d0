"""Standard-form semidefinite programs and a small solver front end.

A problem has PSD matrix blocks ``X_k`` and free scalars ``y``; each
constraint is ``sum_k <A_k, X_k> + f.y = b`` with ``A_k`` symmetric.  The
objective has the same shape and is minimized (zero for pure feasibility).

The numerical work is delegated to a primal-dual interior-point cone solver
with Nesterov-Todd scaling: Clarabel by default, CVXOPT's ``conelp`` as an
alternative backend.  Everything reported in :class:`SdpSolution`
(residuals, eigenvalues, certificate margins) is recomputed here from the
returned iterates, independently of the backend's own bookkeeping.
"""

from __future__ import annotations

import enum
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"
NUMERICAL_FAILURE = "NumericalFailure"


class DimensionMismatch(ValueError):
    pass


class Status(str, enum.Enum):
    FEASIBLE = FEASIBLE
    INFEASIBLE = INFEASIBLE
    NUMERICAL_FAILURE = NUMERICAL_FAILURE

    def __str__(self):
        return self.value


@dataclass
class SolverSettings:
    feas_tol: float = 1e-7
    psd_tol: float = 1e-8
    gap_tol: float = 1e-7
    max_iters: int = 200
    step_fraction: float = 0.98
    backend: str = "clarabel"  # or "cvxopt"

    def __post_init__(self):
        for name in ("feas_tol", "psd_tol", "gap_tol", "step_fraction"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class AffineForm:
    """``sum_k <A_k, X_k> + f.y``; block entries keyed ``(block, row, col)`` with row <= col."""

    blocks: dict = field(default_factory=dict)
    free: dict = field(default_factory=dict)

    def add_block(self, k: int, r: int, c: int, v: float):
        if r > c:
            r, c = c, r
        key = (k, r, c)
        self.blocks[key] = self.blocks.get(key, 0.0) + v

    def add_entry(self, k: int, r: int, c: int, v: float):
        """Coefficient ``v`` on the scalar entry ``X_k[r, c]`` (not the symmetric pair)."""
        self.add_block(k, r, c, v if r == c else 0.5 * v)

    def add_free(self, j: int, v: float):
        self.free[j] = self.free.get(j, 0.0) + v

    def is_empty(self) -> bool:
        return not any(self.blocks.values()) and not any(self.free.values())


@dataclass
class SdpProblem:
    blocks: list[int]
    n_free: int = 0
    constraints: list[AffineForm] = field(default_factory=list)
    rhs: list[float] = field(default_factory=list)
    objective: AffineForm = field(default_factory=AffineForm)

    def add_constraint(self, form: AffineForm, b: float):
        self.constraints.append(form)
        self.rhs.append(float(b))

    def check(self):
        if len(self.constraints) != len(self.rhs):
            raise DimensionMismatch("one right-hand side per constraint required")
        for form in self.constraints + [self.objective]:
            for (k, r, c) in form.blocks:
                if not (0 <= k < len(self.blocks)) or not (0 <= r <= c < self.blocks[k]):
                    raise DimensionMismatch(f"entry {(k, r, c)} outside block sizes {self.blocks}")
            for j in form.free:
                if not 0 <= j < self.n_free:
                    raise DimensionMismatch(f"free variable {j} out of range {self.n_free}")

    # vectorization: upper-triangular entries of each block, then free vars
    def _offsets(self):
        offs, o = [], 0
        for n in self.blocks:
            offs.append(o)
            o += n * (n + 1) // 2
        return offs, o

    @staticmethod
    def _tri_index(n, r, c):
        # row-major upper triangle
        return r * n - r * (r - 1) // 2 + (c - r)

    def _row(self, form: AffineForm, offs, nsym):
        cols, vals = [], []
        for (k, r, c), v in form.blocks.items():
            cols.append(offs[k] + self._tri_index(self.blocks[k], r, c))
            # <A, X> counts off-diagonal entries twice
            vals.append(v if r == c else 2.0 * v)
        for j, v in form.free.items():
            cols.append(nsym + j)
            vals.append(v)
        return cols, vals

    def matrices(self):
        """Return ``(A, b, c)`` over the stacked variable vector."""
        self.check()
        offs, nsym = self._offsets()
        n = nsym + self.n_free
        rows, cols, vals = [], [], []
        for i, form in enumerate(self.constraints):
            cc, vv = self._row(form, offs, nsym)
            rows += [i] * len(cc)
            cols += cc
            vals += vv
        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(self.constraints), n))
        cc, vv = self._row(self.objective, offs, nsym)
        c = np.zeros(n)
        np.add.at(c, cc, vv)
        return A, np.asarray(self.rhs, dtype=float), c

    def unpack(self, z: np.ndarray):
        offs, nsym = self._offsets()
        mats = []
        for k, n in enumerate(self.blocks):
            X = np.zeros((n, n))
            iu = np.triu_indices(n)
            X[iu] = z[offs[k]: offs[k] + n * (n + 1) // 2]
            X = X + np.triu(X, 1).T
            mats.append(X)
        return mats, np.asarray(z[nsym:], dtype=float)

    def pack(self, mats, free) -> np.ndarray:
        parts = [np.asarray(X)[np.triu_indices(X.shape[0])] for X in mats]
        parts.append(np.asarray(free, dtype=float).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def residual(self, mats, free) -> float:
        A, b, _ = self.matrices()
        if A.shape[0] == 0:
            return 0.0
        return float(np.max(np.abs(A @ self.pack(mats, free) - b)))

    def dump(self) -> str:
        """Plain-text sparse triplets: ``block row col constraint coeff``.

        Free-variable coefficients use block ``-1`` with the variable index in
        the row field; right-hand sides use block ``rhs``; objective entries
        use constraint index ``obj``.
        """
        out = io.StringIO()
        out.write(f"# blocks {' '.join(map(str, self.blocks))}\n# free {self.n_free}\n")
        for i, form in enumerate(self.constraints):
            for (k, r, c), v in sorted(form.blocks.items()):
                out.write(f"{k} {r} {c} {i} {v!r}\n")
            for j, v in sorted(form.free.items()):
                out.write(f"-1 {j} 0 {i} {v!r}\n")
            out.write(f"rhs 0 0 {i} {self.rhs[i]!r}\n")
        for (k, r, c), v in sorted(self.objective.blocks.items()):
            out.write(f"{k} {r} {c} obj {v!r}\n")
        for j, v in sorted(self.objective.free.items()):
            out.write(f"-1 {j} 0 obj {v!r}\n")
        return out.getvalue()


@dataclass
class SdpSolution:
    status: Status
    block_values: list
    free_values: np.ndarray
    primal_residual: float
    dual_residual: float
    duality_gap: float
    min_block_eigenvalue: float
    objective_value: float = 0.0
    iterations: int = 0
    infeasibility_margin: float = 0.0
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == Status.FEASIBLE


def psd_project(M: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm (eigenvalue clipping)."""
    M = np.asarray(M, dtype=float)
    S = 0.5 * (M + M.T)
    if S.size == 0:
        return S
    w, V = np.linalg.eigh(S)
    if w[0] >= 0:
        return S
    out = (V * np.clip(w, 0.0, None)) @ V.T
    return 0.5 * (out + out.T)


def min_eigenvalue(mats) -> float:
    vals = [np.linalg.eigvalsh(0.5 * (X + X.T))[0] for X in mats if X.size]
    return float(min(vals)) if vals else 0.0


def _empty_solution(problem, status, msg="", margin=0.0) -> SdpSolution:
    return SdpSolution(
        status=Status(status),
        block_values=[np.zeros((n, n)) for n in problem.blocks],
        free_values=np.zeros(problem.n_free),
        primal_residual=float("inf"),
        dual_residual=float("inf"),
        duality_gap=float("inf"),
        min_block_eigenvalue=0.0,
        infeasibility_margin=margin,
        message=msg,
    )


def _psd_operator(problem: SdpProblem, nvar: int):
    """Sparse G with ``-G z = vec(X)`` (column-major, full n*n rows per block)."""
    offs, _ = problem._offsets()
    rows, cols, vals = [], [], []
    base = 0
    for k, n in enumerate(problem.blocks):
        for r in range(n):
            for c in range(r, n):
                j = offs[k] + SdpProblem._tri_index(n, r, c)
                rows.append(base + c * n + r)
                cols.append(j)
                vals.append(-1.0)
                if r != c:
                    rows.append(base + r * n + c)
                    cols.append(j)
                    vals.append(-1.0)
        base += n * n
    return sp.csr_matrix((vals, (rows, cols)), shape=(base, nvar))


def _to_cvx(M):
    import cvxopt

    M = sp.coo_matrix(M)
    return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)


def solve(problem: SdpProblem, settings: SolverSettings | None = None) -> SdpSolution:
    """Solve ``problem``; report status with independently recomputed residuals."""
    import cvxopt
    import cvxopt.solvers

    settings = settings or SolverSettings()
    A, b, c = problem.matrices()
    nvar = A.shape[1]

    # Trivially inconsistent rows (no variable appears) are infeasibility certificates
    # on their own; empty consistent rows are dropped.
    A = A.tocsr()
    row_nnz = np.diff(A.indptr)
    empty = row_nnz == 0
    if np.any(empty & (np.abs(b) > settings.feas_tol)):
        margin = float(np.max(np.abs(b[empty])))
        return _empty_solution(problem, INFEASIBLE, "constraint with no variables and nonzero rhs", margin)
    keep = np.flatnonzero(~empty)
    A, b = A[keep], b[keep]

    # Free variables absent from every constraint are fixed at zero.
    used_free = np.zeros(nvar, dtype=bool)
    nsym = nvar - problem.n_free
    used_free[:nsym] = True
    if A.shape[0]:
        used_free[np.unique(A.indices)] = True
    active = np.flatnonzero(used_free)

    # Drop linearly dependent equality rows (consistent ones) for the backend.
    Ad = A[:, active].toarray()
    if Ad.shape[0]:
        import scipy.linalg as sla

        Q, R, piv = sla.qr(Ad.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
        tol = max(Ad.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 1e3
        rank = int(np.sum(diag > tol))
        indep = np.sort(piv[:rank])
        if rank < Ad.shape[0]:
            sol, *_ = np.linalg.lstsq(Ad[indep], b[indep], rcond=None)
            if np.max(np.abs(Ad @ sol - b)) > settings.feas_tol * max(1.0, np.max(np.abs(b))):
                return _empty_solution(problem, INFEASIBLE, "inconsistent equality system", 1.0)
            Ad, b_used = Ad[indep], b[indep]
        else:
            b_used = b
    else:
        b_used = b

    G = _psd_operator(problem, nvar)[:, active]
    h = np.zeros(G.shape[0])
    dims = {"l": 0, "q": [], "s": list(problem.blocks)}
    opts = {
        "show_progress": False,
        "maxiters": settings.max_iters,
        "abstol": settings.gap_tol * 1e-2,
        "reltol": settings.gap_tol * 1e-1,
        "feastol": settings.feas_tol * 1e-2,
        "refinement": 2,
    }
    c_act = c[active]
    if settings.backend == "clarabel":
        res = _run_clarabel(problem, settings, c_act, Ad, b_used, active, nsym)
    elif settings.backend == "cvxopt":
        try:
            res = cvxopt.solvers.conelp(
                cvxopt.matrix(c_act),
                _to_cvx(G),
                cvxopt.matrix(h),
                dims,
                _to_cvx(sp.csr_matrix(Ad)) if Ad.shape[0] else cvxopt.spmatrix([], [], [], (0, len(active))),
                cvxopt.matrix(b_used) if Ad.shape[0] else cvxopt.matrix(0.0, (0, 1)),
                options=opts,
            )
        except (ValueError, ArithmeticError) as exc:
            return _empty_solution(problem, NUMERICAL_FAILURE, f"backend error: {exc}")
    else:
        raise ValueError(f"unknown backend {settings.backend!r}")
    if res is None:
        return _empty_solution(problem, NUMERICAL_FAILURE, "backend error")

    return _interpret(problem, settings, res, active, Ad, b_used, G, c_act)


def _svec_maps(problem: SdpProblem, active, nsym):
    """Row blocks mapping our variables to Clarabel's scaled upper triangles.

    Returns ``(S, order)`` where ``S @ x`` is the concatenated svec of all
    blocks (column-major upper triangle, off-diagonals times sqrt 2) and
    ``order[k]`` lists the ``(r, c)`` pairs of block ``k`` in svec order.
    """
    offs, _ = problem._offsets()
    pos = {j: i for i, j in enumerate(active)}
    rows, cols, vals, orders = [], [], [], []
    row = 0
    for k, n in enumerate(problem.blocks):
        order = []
        for c in range(n):
            for r in range(c + 1):
                j = offs[k] + SdpProblem._tri_index(n, r, c)
                rows.append(row)
                cols.append(pos[j])
                vals.append(1.0 if r == c else math.sqrt(2.0))
                order.append((r, c))
                row += 1
        orders.append(order)
    return sp.csc_matrix((vals, (rows, cols)), shape=(row, len(active))), orders


def _unsvec_full(problem: SdpProblem, v, orders) -> np.ndarray:
    """Concatenated svec -> concatenated full column-major matrices."""
    out, o = [], 0
    for n, order in zip(problem.blocks, orders):
        M = np.zeros((n, n))
        for (r, c), val in zip(order, v[o: o + len(order)]):
            if r == c:
                M[r, r] = val
            else:
                M[r, c] = M[c, r] = val / math.sqrt(2.0)
        out.append(M.reshape(-1, order="F"))
        o += len(order)
    return np.concatenate(out) if out else np.zeros(0)


def _run_clarabel(problem, settings, c, Ad, b, active, nsym):
    """Solve with Clarabel; return a result dict in the cvxopt conelp layout."""
    import clarabel

    S, orders = _svec_maps(problem, active, nsym)
    m_eq = Ad.shape[0]
    A = sp.vstack([sp.csc_matrix(Ad), -S]).tocsc()
    rhs = np.concatenate([b, np.zeros(S.shape[0])])
    cones = ([clarabel.ZeroConeT(m_eq)] if m_eq else []) + [
        clarabel.PSDTriangleConeT(n) for n in problem.blocks
    ]
    opts = clarabel.DefaultSettings()
    opts.verbose = False
    opts.max_iter = settings.max_iters
    # tighter than the acceptance tolerances so that PSD projection and the
    # symbolic residual check downstream keep a safety margin
    opts.tol_feas = settings.feas_tol * 1e-3
    opts.tol_gap_abs = settings.gap_tol * 1e-3
    opts.tol_gap_rel = settings.gap_tol * 1e-3
    opts.tol_infeas_abs = settings.feas_tol * 1e-2
    opts.tol_infeas_rel = settings.feas_tol * 1e-2
    P = sp.csc_matrix((len(c), len(c)))
    try:
        sol = clarabel.DefaultSolver(P, np.asarray(c, dtype=float), A, rhs, cones, opts).solve()
    except Exception as exc:  # the extension raises plain exceptions on bad data
        logger.warning("clarabel failed: %s", exc)
        return None
    status = str(sol.status)
    x, s_, z = np.array(sol.x), np.array(sol.s), np.array(sol.z)
    y, zpsd = z[:m_eq], z[m_eq:]
    res = {"iterations": int(sol.iterations), "y": y, "z": _unsvec_full(problem, zpsd, orders)}
    if "PrimalInfeasible" in status:
        res["status"] = "primal infeasible"
        by = float(b @ y) if m_eq else 0.0
        if by < 0:
            res["y"] = y / -by
            res["z"] = res["z"] / -by
        res["x"] = None
        return res
    if status in ("Solved", "AlmostSolved"):
        res["status"] = "optimal" if status == "Solved" else "unknown"
        res["x"] = x
        res["s"] = _unsvec_full(problem, s_[m_eq:], orders)
        return res
    res["status"] = status
    res["x"] = None
    return res


def _blocks_from_s(problem, s):
    mats, o = [], 0
    for n in problem.blocks:
        M = np.array(s[o: o + n * n]).reshape(n, n, order="F")
        mats.append(0.5 * (M + M.T))
        o += n * n
    return mats


def _interpret(problem, settings, res, active, Ad, b, G, c) -> SdpSolution:
    status = res["status"]
    nvar = problem._offsets()[1] + problem.n_free
    iters = int(res.get("iterations", 0))

    if status == "primal infeasible":
        # Farkas ray: A^T y + G^T z = 0, b.y = -1 (after cvxopt normalization), z PSD.
        y = np.array(res["y"]).ravel() if res["y"] is not None else np.zeros(0)
        zv = np.array(res["z"]).ravel()
        zmats = _blocks_from_s(problem, zv)
        psd_violation = min(0.0, min_eigenvalue(zmats))
        ray_res = np.abs((Ad.T @ y if y.size else 0.0) + G.T @ zv)
        ray_res = float(np.max(ray_res)) if np.size(ray_res) else 0.0
        margin = -float(b @ y) if y.size else 0.0
        scale = max(1.0, float(np.max(np.abs(zv))) if zv.size else 1.0, float(np.max(np.abs(y))) if y.size else 1.0)
        if ray_res <= settings.feas_tol * scale and psd_violation >= -settings.psd_tol * scale and margin > settings.feas_tol:
            sol = _empty_solution(problem, INFEASIBLE, "dual improving ray", margin)
            sol.iterations = iters
            return sol
        sol = _empty_solution(problem, NUMERICAL_FAILURE, "unverified infeasibility ray")
        sol.iterations = iters
        return sol

    if res["x"] is None:
        sol = _empty_solution(problem, NUMERICAL_FAILURE, f"backend status {status}")
        sol.iterations = iters
        return sol

    z = np.zeros(nvar)
    z[active] = np.array(res["x"]).ravel()
    s = np.array(res["s"]).ravel()
    mats = _blocks_from_s(problem, s)
    _, free = problem.unpack(z)
    primal_res = problem.residual(mats, free)
    mineig = min_eigenvalue(mats)

    y = np.array(res["y"]).ravel() if res["y"] is not None and Ad.shape[0] else np.zeros(0)
    zz = np.array(res["z"]).ravel() if res["z"] is not None else np.zeros(G.shape[0])
    dual_vec = c + (Ad.T @ y if y.size else 0.0) + G.T @ zz
    dual_res = float(np.max(np.abs(dual_vec))) if dual_vec.size else 0.0
    pobj = float(c @ np.array(res["x"]).ravel())
    dobj = -float(b @ y) if y.size else 0.0
    gap = abs(pobj - dobj)

    ok = primal_res <= settings.feas_tol and mineig >= -settings.psd_tol
    st = Status.FEASIBLE if ok else Status.NUMERICAL_FAILURE
    return SdpSolution(
        status=st,
        block_values=mats,
        free_values=free,
        primal_residual=primal_res,
        dual_residual=dual_res,
        duality_gap=gap,
        min_block_eigenvalue=mineig,
        objective_value=pobj,
        iterations=iters,
        message=f"backend status {status}",
    )
