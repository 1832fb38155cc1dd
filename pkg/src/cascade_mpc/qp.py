"""
Convex QP container, variable registry and solver adapters.

Model builders emit a :class:`QpProblem` in the standard form

    minimize    1/2 x'Px + c'x + offset
    subject to  l <= Ax <= u,   lb <= x <= ub

and never talk to a concrete solver. Infinite bounds are encoded as
``numpy.inf``; equalities as rows with ``l == u``.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Hashable, Iterator, Optional

import numpy as np
import scipy.sparse as sp

import clarabel
import osqp

INF = np.inf


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"
    NUMERICAL_ERROR = "NumericalError"


class QpError(RuntimeError):
    """Raised when a solve that must succeed does not return Optimal."""

    def __init__(self, status, message=""):
        self.status = status
        super().__init__(f"QP solve failed with status {status.value}. {message}".strip())


class VariableRegistry:
    """Bijective map from structured keys to dense variable indices."""

    def __init__(self):
        self._index: dict[Hashable, int] = {}
        self._keys: list[Hashable] = []

    def register(self, key: Hashable) -> int:
        if key in self._index:
            raise KeyError(f"variable {key!r} already registered")
        idx = len(self._keys)
        self._index[key] = idx
        self._keys.append(key)
        return idx

    def __getitem__(self, key: Hashable) -> int:
        return self._index[key]

    def __contains__(self, key: Hashable) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._keys)

    def __iter__(self) -> Iterator[Hashable]:
        return iter(self._keys)

    def key_of(self, index: int) -> Hashable:
        return self._keys[index]


class RowBuilder:
    """Accumulates sparse constraint rows as COO triplets."""

    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.tags: list[Hashable] = []

    def add(self, coeffs, lower: float, upper: float, tag: Hashable = None) -> int:
        """Add ``lower <= sum(v * x[i] for i, v in coeffs) <= upper``."""
        r = len(self.lower)
        for i, v in coeffs:
            if v != 0.0:
                self.rows.append(r)
                self.cols.append(i)
                self.vals.append(float(v))
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self.tags.append(tag)
        return r

    def __len__(self) -> int:
        return len(self.lower)

    def matrix(self, num_vars: int) -> sp.csc_matrix:
        A = sp.csc_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.lower), num_vars))
        A.eliminate_zeros()   # repeated indices may cancel
        return A


@dataclass(frozen=True)
class QpProblem:
    """Standard-form convex QP. ``P`` holds the full symmetric matrix."""

    P: sp.csc_matrix
    c: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    offset: float = 0.0
    row_tags: tuple = field(default=(), compare=False)

    def __post_init__(self):
        n = self.num_vars
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns, expected {n}")
        m = self.A.shape[0]
        for name in ("l", "u"):
            if getattr(self, name).shape != (m,):
                raise ValueError(f"{name} must have length {m}")
        for name in ("lb", "ub"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        arrays = (self.c, self.l, self.u, self.lb, self.ub)
        if any(np.isnan(a).any() for a in arrays):
            raise ValueError("NaN in QP data; use +/-inf for absent bounds")
        if np.any(self.l > self.u) or np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def num_vars(self) -> int:
        return self.c.shape[0]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.c @ x + self.offset)

    def residuals(self, x: np.ndarray) -> tuple[float, float]:
        """Max violation of the linear rows and of the variable bounds."""
        ax = self.A @ x
        row = np.maximum(np.maximum(self.l - ax, ax - self.u), 0.0)
        box = np.maximum(np.maximum(self.lb - x, x - self.ub), 0.0)
        return (float(row.max(initial=0.0)), float(box.max(initial=0.0)))

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "QpProblem":
        return QpProblem(self.P, self.c, self.A, self.l, self.u,
                         np.asarray(lb, float), np.asarray(ub, float),
                         self.offset, self.row_tags)


@dataclass(frozen=True)
class QpSolution:
    primal: Optional[np.ndarray]
    objective: float
    status: QpStatus
    solve_time: float

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def assemble(registry: VariableRegistry, rows: RowBuilder, *, quad_diag=None,
             linear=None, lb=None, ub=None, offset=0.0) -> QpProblem:
    """Freeze builder state into a :class:`QpProblem` with diagonal Hessian."""
    n = len(registry)
    diag = np.zeros(n) if quad_diag is None else np.asarray(quad_diag, float)
    return QpProblem(
        P=sp.diags(diag, format="csc"),
        c=np.zeros(n) if linear is None else np.asarray(linear, float),
        A=rows.matrix(n),
        l=np.asarray(rows.lower, float),
        u=np.asarray(rows.upper, float),
        lb=np.full(n, -INF) if lb is None else np.asarray(lb, float),
        ub=np.full(n, INF) if ub is None else np.asarray(ub, float),
        offset=float(offset),
        row_tags=tuple(rows.tags),
    )


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

_CLARABEL_STATUS = {
    "Solved": QpStatus.OPTIMAL,
    "AlmostSolved": QpStatus.OPTIMAL,
    "PrimalInfeasible": QpStatus.INFEASIBLE,
    "AlmostPrimalInfeasible": QpStatus.INFEASIBLE,
    "DualInfeasible": QpStatus.UNBOUNDED,
    "AlmostDualInfeasible": QpStatus.UNBOUNDED,
    "MaxIterations": QpStatus.ITER_LIMIT,
    "MaxTime": QpStatus.ITER_LIMIT,
}


def _conic_form(problem: QpProblem):
    """Translate two-sided rows and bounds into Clarabel's Ax + s = b form."""
    n = problem.num_vars
    eye = sp.identity(n, format="csr")
    A = sp.vstack([problem.A.tocsr(), eye], format="csr")
    lo = np.concatenate([problem.l, problem.lb])
    hi = np.concatenate([problem.u, problem.ub])

    eq = lo == hi
    upper = ~eq & np.isfinite(hi)
    lower = ~eq & np.isfinite(lo)
    # an identity row with lb == ub is still an equality
    blocks = [A[eq], A[upper], -A[lower]]
    rhs = np.concatenate([hi[eq], hi[upper], -lo[lower]])
    cones = []
    if eq.any():
        cones.append(clarabel.ZeroConeT(int(eq.sum())))
    n_ineq = int(upper.sum() + lower.sum())
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    return sp.vstack(blocks, format="csc"), rhs, cones


def _solve_clarabel(problem: QpProblem, tol: float) -> QpSolution:
    A, b, cones = _conic_form(problem)
    settings = _clarabel_settings(tol)
    P = sp.triu(problem.P, format="csc")
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, problem.c, A, b, cones, settings)
    res = solver.solve()
    elapsed = time.perf_counter() - t0
    status = _CLARABEL_STATUS.get(str(res.status), QpStatus.NUMERICAL_ERROR)
    if status is not QpStatus.OPTIMAL:
        return QpSolution(None, INF, status, elapsed)
    x = np.array(res.x)
    return QpSolution(x, problem.objective(x), status, elapsed)


def _osqp_data(problem: QpProblem):
    n = problem.num_vars
    A = sp.vstack([problem.A, sp.identity(n, format="csc")], format="csc")
    lo = np.concatenate([problem.l, problem.lb])
    hi = np.concatenate([problem.u, problem.ub])
    return sp.triu(problem.P, format="csc"), A, lo, hi


_OSQP_STATUS = {
    "solved": QpStatus.OPTIMAL,
    "solved inaccurate": QpStatus.OPTIMAL,
    "primal infeasible": QpStatus.INFEASIBLE,
    "primal infeasible inaccurate": QpStatus.INFEASIBLE,
    "dual infeasible": QpStatus.UNBOUNDED,
    "dual infeasible inaccurate": QpStatus.UNBOUNDED,
    "maximum iterations reached": QpStatus.ITER_LIMIT,
}

OSQP_SETTINGS = dict(
    eps_abs=1e-7, eps_rel=1e-7, max_iter=200000, polishing=True,
    polish_refine_iter=10, verbose=False, adaptive_rho=True,
)


def _solve_osqp(problem: QpProblem, tol: float) -> QpSolution:
    P, A, lo, hi = _osqp_data(problem)
    solver = osqp.OSQP()
    t0 = time.perf_counter()
    solver.setup(P, problem.c, A, lo, hi, **{**OSQP_SETTINGS, "eps_abs": tol, "eps_rel": tol})
    res = solver.solve(raise_error=False)
    elapsed = time.perf_counter() - t0
    status = _OSQP_STATUS.get(res.info.status, QpStatus.NUMERICAL_ERROR)
    if status is not QpStatus.OPTIMAL:
        return QpSolution(None, INF, status, elapsed)
    x = np.array(res.x)
    return QpSolution(x, problem.objective(x), status, elapsed)


BACKENDS = {"clarabel": _solve_clarabel, "osqp": _solve_osqp}


def column_scale(problem: QpProblem) -> np.ndarray:
    """Variable scaling ``x = d * y`` that evens out each column's coefficients.

    ``d_j`` is the inverse geometric mean of the largest and smallest
    nonzero magnitude in column ``j`` of ``A``. Discharges meet both
    ramp rows (unit coefficients) and level rows (``dt/S ~ 1e-5``); without
    this the interior-point backend stalls short of the optimum.
    """
    d = np.ones(problem.num_vars)
    if problem.num_rows == 0:
        return d
    A = abs(problem.A.tocsc())
    A.eliminate_zeros()
    hi = A.max(axis=0).toarray().ravel()
    A.data = 1.0 / A.data
    lo_inv = A.max(axis=0).toarray().ravel()
    nz = hi > 0
    d[nz] = np.sqrt(lo_inv[nz] / hi[nz])
    return np.clip(d, 1e-3, 1e3)


def _scaled(problem: QpProblem, d: np.ndarray) -> QpProblem:
    D = sp.diags(d)
    return QpProblem(P=(D @ problem.P @ D).tocsc(), c=problem.c * d, A=(problem.A @ D).tocsc(),
                     l=problem.l, u=problem.u, lb=problem.lb / d, ub=problem.ub / d,
                     offset=problem.offset, row_tags=problem.row_tags)


def solve(problem: QpProblem, backend: str = "clarabel", tol: float = 1e-10) -> QpSolution:
    """Solve ``problem`` with the named backend.

    Parameters
    ----------
    problem : QpProblem
    backend : {"clarabel", "osqp"}
        Clarabel (interior point) is the accurate default. OSQP is a
        first-order method, cheaper but less precise.
    tol : float
        Feasibility and duality-gap tolerance handed to the backend.

    Returns
    -------
    QpSolution
        ``primal`` is ``None`` unless ``status`` is Optimal.
    """
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown QP backend {backend!r}") from None
    d = column_scale(problem)
    try:
        sol = fn(_scaled(problem, d), tol)
    except (ValueError, RuntimeError, osqp.OSQPException):
        return QpSolution(None, INF, QpStatus.NUMERICAL_ERROR, 0.0)
    if sol.primal is None:
        return sol
    x = sol.primal * d
    return QpSolution(x, problem.objective(x), sol.status, sol.solve_time)


def _clarabel_settings(tol: float):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_threads = 1
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = 1e-8
    settings.max_iter = 200
    return settings


class ParametricQp:
    """A QP solved repeatedly with only the linear cost changing.

    Used for the consensus subproblems, whose constraints and quadratic
    penalty are fixed across ADMM iterations. With Clarabel the symbolic
    KKT factorization is reused and only ``c`` is updated between calls.
    With OSQP each call warm-starts from the previous primal/dual pair;
    OSQP fixes its cost scaling at setup, so the solver is rebuilt when
    the magnitude of ``c`` drifts by more than a factor of two.
    """

    def __init__(self, problem: QpProblem, tol: float = 1e-8, backend: str = "clarabel"):
        if backend not in BACKENDS:
            raise ValueError(f"unknown QP backend {backend!r}")
        self.problem = problem
        self.tol = tol
        self.backend = backend
        self._d = column_scale(problem)
        scaled = _scaled(problem, self._d)
        if backend == "clarabel":
            A, b, cones = _conic_form(scaled)
            settings = _clarabel_settings(tol)
            settings.presolve_enable = False
            self._solver = clarabel.DefaultSolver(sp.triu(scaled.P, format="csc"), scaled.c,
                                                  A, b, cones, settings)
        else:
            self._data = _osqp_data(scaled)
            self._solver = None
            self._norm = None
            self._warm = None
            self._fallback = None

    def _setup_osqp(self, q: np.ndarray) -> None:
        P, A, lo, hi = self._data
        self._solver = osqp.OSQP()
        self._solver.setup(P, q, A, lo, hi,
                           **{**OSQP_SETTINGS, "eps_abs": self.tol, "eps_rel": self.tol})
        self._norm = max(float(np.abs(q).max(initial=0.0)), 1e-12)
        if self._warm is not None:
            self._solver.warm_start(x=self._warm[0], y=self._warm[1])

    def _solve_osqp(self, q: np.ndarray):
        norm = max(float(np.abs(q).max(initial=0.0)), 1e-12)
        if self._solver is None or not (0.5 <= norm / self._norm <= 2.0):
            self._setup_osqp(q)
        else:
            self._solver.update(q=q)
        res = self._solver.solve(raise_error=False)
        status = _OSQP_STATUS.get(res.info.status, QpStatus.NUMERICAL_ERROR)
        if status is not QpStatus.OPTIMAL:
            self._setup_osqp(q)
            res = self._solver.solve(raise_error=False)
            status = _OSQP_STATUS.get(res.info.status, QpStatus.NUMERICAL_ERROR)
        if status is QpStatus.OPTIMAL:
            self._warm = (np.array(res.x), np.array(res.y))
        return np.array(res.x), status

    def solve(self, c: np.ndarray) -> QpSolution:
        t0 = time.perf_counter()
        c = np.asarray(c, float)
        q = c * self._d
        if self.backend == "clarabel":
            self._solver.update(q=q)
            res = self._solver.solve()
            y = np.array(res.x)
            status = _CLARABEL_STATUS.get(str(res.status), QpStatus.NUMERICAL_ERROR)
        else:
            y, status = self._solve_osqp(q)
            if status is not QpStatus.OPTIMAL:
                # first-order stall: fall back to the interior-point engine
                if self._fallback is None:
                    self._fallback = ParametricQp(self.problem, self.tol, "clarabel")
                sol = self._fallback.solve(c)
                if sol.ok:
                    self._warm = None
                return sol
        elapsed = time.perf_counter() - t0
        if status is not QpStatus.OPTIMAL:
            return QpSolution(None, INF, status, elapsed)
        x = y * self._d
        obj = float(0.5 * x @ (self.problem.P @ x) + c @ x + self.problem.offset)
        return QpSolution(x, obj, status, elapsed)


def dump_problem(problem: QpProblem, path) -> None:
    """Write ``problem`` as row/col/value triplets plus bound vectors."""
    P = sp.coo_matrix(problem.P)
    A = sp.coo_matrix(problem.A)

    def fmt(v):
        return "inf" if v == INF else "-inf" if v == -INF else repr(float(v))

    with open(path, "w") as fh:
        fh.write(f"% cascade_mpc QP dump: {problem.num_vars} vars, {problem.num_rows} rows\n")
        fh.write(f"offset {fmt(problem.offset)}\n")
        fh.write(f"P {P.shape[0]} {P.shape[1]} {P.nnz}\n")
        for i, j, v in zip(P.row, P.col, P.data):
            fh.write(f"{i + 1} {j + 1} {fmt(v)}\n")
        fh.write(f"A {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i + 1} {j + 1} {fmt(v)}\n")
        for name in ("c", "l", "u", "lb", "ub"):
            vec = getattr(problem, name)
            fh.write(f"{name} {vec.shape[0]}\n")
            fh.write("\n".join(fmt(v) for v in vec) + "\n")
