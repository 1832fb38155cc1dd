"""
Consensus ADMM over the aggregated model.

The aggregated QP is split into one balance subproblem (energy balance,
imbalance settlement, shared first-stage discharges) and one hydro
subproblem per plant and scenario (reservoir dynamics, ramps, head,
envelope, level tracking). Discharges and powers are *global* variables:
every subproblem that touches one holds a local copy, and the iteration
drives all copies to agreement.

Copies per global scalar:

========================  =====================================
discharge of plant n<N-1  hydro n, hydro n+1 (inflow), balance
discharge of plant N-1    hydro N-1, balance
power                     hydro n, balance
========================  =====================================

The certified tail adds the upstream plant's weighted discharge sums,
shared between hydro n and hydro n+1.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .aggregation import AggregatedModelHandle
from .model import ControlAction, VarKey
from .qp import ParametricQp, QpError, QpProblem, QpStatus

GLOBAL_KINDS = ("q_tr", "q_br", "p_h")
BALANCE = ("balance",)


def thread_count() -> int:
    """Worker cap from ``CASCADE_THREADS`` (default: CPU count)."""
    raw = os.environ.get("CASCADE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass(frozen=True)
class AdmmConfig:
    """Step size, iteration cap and objective-change threshold (percent).

    ``execution`` selects how the local updates run: ``"batched"`` stacks
    all hydro subproblems into one block-diagonal QP (fastest on a single
    core), ``"threads"`` solves each subproblem separately on a thread pool.
    """

    rho: float = 1.0
    max_iters: int = 2000
    obj_tol: float = 1e-3
    residual_tol: float = 1e-4
    dual_tol: float = 1e-3
    discharge_unit: float = 50.0
    power_unit: float = 1.0
    solver_tol: float = 1e-8
    backend: str = "clarabel"
    execution: str = "batched"

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.obj_tol > 0:
            raise ValueError("obj_tol must be positive")
        if not (self.discharge_unit > 0 and self.power_unit > 0):
            raise ValueError("consensus units must be positive")
        if self.execution not in ("batched", "threads"):
            raise ValueError(f"unknown execution mode {self.execution!r}")


@dataclass
class Subproblem:
    """One block of the decomposition.

    ``problem`` carries only the block's own cost (no penalty). ``copies``
    are local indices of global copies, ``globals_`` the matching global
    indices (a local variable may copy several globals, as the balance's
    shared first-stage discharge does for every scenario).
    """

    name: tuple
    problem: QpProblem
    keys: list
    copies: np.ndarray
    globals_: np.ndarray


@dataclass
class SubproblemSet:
    balance: Subproblem
    hydro: dict            # (n, w) -> Subproblem

    def all(self) -> list[Subproblem]:
        return [self.balance] + [self.hydro[k] for k in sorted(self.hydro)]

    def __len__(self) -> int:
        return 1 + len(self.hydro)


@dataclass
class ConsensusLayout:
    """Global variables and their copies."""

    keys: list                      # global index -> VarKey
    index: dict                     # VarKey -> global index
    copy_count: np.ndarray
    num_plants: int
    num_scenarios: int
    num_clusters: int
    scale: np.ndarray = None        # consensus unit per global (z = x / scale)

    def __post_init__(self):
        if self.scale is None:
            self.scale = np.ones(len(self.keys))

    def stack(self, n: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Global indices of the stacked vector of plant ``n``, scenario ``w``.

        Order: upstream ``q_tr, q_br`` (absent for plant 0), own
        ``q_tr, q_br, p_h`` (hydro copies), then own ``q_tr, q_br, p_h``
        again (balance copies). Returns ``(indices, mask_A, mask_B)``; the
        masks partition the stack.
        """
        R = self.num_clusters
        parts = []
        if n > 0:
            parts += [("q_tr", n - 1), ("q_br", n - 1)]
        hydro = parts + [("q_tr", n), ("q_br", n), ("p_h", n)]
        balance = [("q_tr", n), ("q_br", n), ("p_h", n)]
        idx = [self.index[VarKey(k, m, w, r)] for k, m in hydro + balance for r in range(R)]
        a = np.zeros(len(idx), bool)
        a[: len(hydro) * R] = True
        return np.array(idx), a, ~a


def consensus_scale(layout: ConsensusLayout, config: AdmmConfig) -> np.ndarray:
    """Consensus unit per global: powers in ``power_unit``, everything else in ``discharge_unit``."""
    return np.array([config.power_unit if k.kind == "p_h" else config.discharge_unit
                     for k in layout.keys])


def _owner(tag) -> tuple:
    n, w = tag[1], tag[2]
    return BALANCE if n is None else ("hydro", n, w)


def split_consensus(agg: AggregatedModelHandle) -> tuple[SubproblemSet, ConsensusLayout]:
    """Decompose ``agg`` into balance and hydro subproblems plus a consensus layout."""
    prob, reg = agg.problem, agg.registry
    N, W, R = agg.num_plants, agg.num_scenarios, agg.num_periods
    A = prob.A.tocsr()
    keys = [reg.key_of(j) for j in range(prob.num_vars)]

    # rows by owner
    owners = [_owner(t) for t in prob.row_tags]
    rows_of: dict = {}
    for i, o in enumerate(owners):
        rows_of.setdefault(o, []).append(i)

    # variables referenced per owner, used to find shared non-discharge variables
    users: dict = {}
    for o, rows in rows_of.items():
        for j in np.unique(A[rows].indices):
            users.setdefault(int(j), set()).add(o)

    def context_key(j: int, w: Optional[int]) -> VarKey:
        k = keys[j]
        if k.kind in ("u_tr", "u_br"):
            return VarKey("q_" + k.kind[2:], k.n, w, 0)
        return k

    # global variables: all discharges and powers, plus anything seen by two blocks
    gkeys = [VarKey(kind, n, w, r) for w in range(W) for n in range(N)
             for kind in GLOBAL_KINDS for r in range(R)]
    for j, who in sorted(users.items()):
        k = keys[j]
        if len(who) > 1 and k.kind not in GLOBAL_KINDS + ("u_tr", "u_br"):
            gkeys.append(k)
    gindex = {k: i for i, k in enumerate(gkeys)}

    charged: set = set()

    def build(name, rows, local_keys, local_src, local_of, copy_pairs):
        """Assemble one block from its row set and local variable list."""
        n_loc = len(local_keys)
        sub = A[rows] if rows else sp.csr_matrix((0, prob.num_vars))
        coo = sub.tocoo()
        cols = np.array([local_of(int(j)) for j in coo.col], dtype=int)
        A_loc = sp.csc_matrix((coo.data, (coo.row, cols)), shape=(len(rows), n_loc))
        lb, ub = np.empty(n_loc), np.empty(n_loc)
        c, q = np.zeros(n_loc), np.zeros(n_loc)
        for li, src in enumerate(local_src):
            lb[li], ub[li] = prob.lb[src], prob.ub[src]
            if src in owned_cost and src not in charged:
                c[li], q[li] = prob.c[src], pdiag[src]
                charged.add(src)
        offset = prob.offset if name == BALANCE else 0.0
        qp = QpProblem(P=sp.diags(q, format="csc"), c=c, A=A_loc,
                       l=prob.l[rows], u=prob.u[rows], lb=lb, ub=ub, offset=offset,
                       row_tags=tuple(prob.row_tags[i] for i in rows))
        loc, glob = zip(*copy_pairs) if copy_pairs else ((), ())
        return Subproblem(name, qp, list(local_keys), np.array(loc, int), np.array(glob, int))

    # each costed variable is charged once, in the first block that holds it
    pdiag = prob.P.diagonal()
    owned_cost = set(np.flatnonzero((prob.c != 0) | (pdiag != 0)).tolist())

    # hydro blocks
    hydro = {}
    for n in range(N):
        for w in range(W):
            name = ("hydro", n, w)
            rows = rows_of.get(name, [])
            local_keys, local_src, pos = [], [], {}

            def add(key, src):
                pos[key] = len(local_keys)
                local_keys.append(key)
                local_src.append(src)

            def src_of(key):
                if key.kind in ("q_tr", "q_br") and key.k == 0:
                    return reg[VarKey("u_" + key.kind[2:], key.n, None, None)]
                return reg[key]

            # stacked copies first, in layout order
            slots = ([("q_tr", n - 1), ("q_br", n - 1)] if n > 0 else []) + \
                [("q_tr", n), ("q_br", n), ("p_h", n)]
            for kind, m in slots:
                for r in range(R):
                    key = VarKey(kind, m, w, r)
                    add(key, src_of(key))
            for j in np.unique(A[rows].indices) if rows else []:
                key = context_key(int(j), w)
                if key not in pos:
                    add(key, int(j))

            def local_of(j, w=w, pos=pos):
                return pos[context_key(j, w)]

            pairs = [(li, gindex[k]) for li, k in enumerate(local_keys) if k in gindex]
            hydro[(n, w)] = build(name, rows, local_keys, local_src, local_of, pairs)

    # balance block: shared u plus copies of every discharge and power
    rows = rows_of.get(BALANCE, [])
    local_keys, local_src, pos = [], [], {}
    for n in range(N):
        for kind in ("u_tr", "u_br"):
            key = VarKey(kind, n, None, None)
            pos[key] = len(local_keys)
            local_keys.append(key)
            local_src.append(reg[key])
    for w in range(W):
        for n in range(N):
            for kind in GLOBAL_KINDS:
                for r in range(R):
                    if kind != "p_h" and r == 0:
                        continue
                    key = VarKey(kind, n, w, r)
                    pos[key] = len(local_keys)
                    local_keys.append(key)
                    local_src.append(reg[key])
    for j in np.unique(A[rows].indices) if rows else []:
        key = keys[int(j)]
        if key not in pos:
            pos[key] = len(local_keys)
            local_keys.append(key)
            local_src.append(int(j))
    pairs = []
    for li, k in enumerate(local_keys):
        if k.kind in ("u_tr", "u_br"):
            pairs += [(li, gindex[VarKey("q_" + k.kind[2:], k.n, w, 0)]) for w in range(W)]
        elif k in gindex:
            pairs.append((li, gindex[k]))
    balance = build(BALANCE, rows, local_keys, local_src, lambda j: pos[keys[j]], pairs)

    subs = SubproblemSet(balance, hydro)
    counts = np.zeros(len(gkeys), int)
    for s in subs.all():
        np.add.at(counts, s.globals_, 1)
    layout = ConsensusLayout(gkeys, gindex, counts, N, W, R)
    return subs, layout


# ---------------------------------------------------------------------------
# iteration state and steps
# ---------------------------------------------------------------------------

@dataclass
class ConsensusState:
    """Globals ``z``, per-copy duals ``lam`` and the latest local solutions."""

    z: np.ndarray
    lam: list                  # per subproblem, one entry per copy
    x: list                    # per subproblem, local primal
    iteration: int = 0
    objective: list = field(default_factory=list)

    @classmethod
    def zeros(cls, subs: SubproblemSet, layout: ConsensusLayout) -> "ConsensusState":
        blocks = subs.all()
        return cls(np.zeros(len(layout.keys)), [np.zeros(len(s.copies)) for s in blocks],
                   [np.zeros(s.problem.num_vars) for s in blocks])


class _Solvers:
    """Local-update engines; penalty Hessian is fixed, so only ``c`` changes per iteration."""

    def __init__(self, subs: SubproblemSet, layout: "ConsensusLayout", config: AdmmConfig):
        self.blocks = subs.all()
        self.config = config
        rho = config.rho
        self.penalised = []
        for s in self.blocks:
            diag = np.zeros(s.problem.num_vars)
            np.add.at(diag, s.copies, rho / layout.scale[s.globals_] ** 2)
            p = s.problem
            self.penalised.append(QpProblem(P=(p.P + sp.diags(diag)).tocsc(), c=p.c, A=p.A, l=p.l,
                                            u=p.u, lb=p.lb, ub=p.ub, offset=p.offset,
                                            row_tags=p.row_tags))
        if config.execution == "batched":
            # balance alone, all hydro blocks stacked block-diagonally
            self.groups = [[0], list(range(1, len(self.blocks)))]
        else:
            self.groups = [[i] for i in range(len(self.blocks))]
        self.engines = [ParametricQp(_stack([self.penalised[i] for i in g]), tol=config.solver_tol,
                                     backend=config.backend)
                        for g in self.groups]
        self.sizes = [[self.blocks[i].problem.num_vars for i in g] for g in self.groups]

    def solve(self, linear: list) -> list:
        def run(gi):
            g = self.groups[gi]
            c = np.concatenate([linear[i] for i in g])
            sol = self.engines[gi].solve(c)
            if not sol.ok:
                names = [self.blocks[i].name for i in g]
                raise QpError(sol.status, f"ADMM subproblem {names[:3]}")
            return np.split(sol.primal, np.cumsum(self.sizes[gi])[:-1])

        workers = min(thread_count(), len(self.groups))
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, range(len(self.groups))))
        else:
            parts = [run(gi) for gi in range(len(self.groups))]
        out = [None] * len(self.blocks)
        for g, xs in zip(self.groups, parts):
            for i, x in zip(g, xs):
                out[i] = x
        return out


def _stack(problems: list[QpProblem]) -> QpProblem:
    if len(problems) == 1:
        return problems[0]
    cat = np.concatenate
    return QpProblem(P=sp.block_diag([p.P for p in problems], format="csc"),
                     c=cat([p.c for p in problems]),
                     A=sp.block_diag([p.A for p in problems], format="csc"),
                     l=cat([p.l for p in problems]), u=cat([p.u for p in problems]),
                     lb=cat([p.lb for p in problems]), ub=cat([p.ub for p in problems]),
                     offset=sum(p.offset for p in problems))


def local_update(state: ConsensusState, subs: SubproblemSet, layout: ConsensusLayout,
                 config: AdmmConfig,
                 solvers: Optional[_Solvers] = None) -> ConsensusState:
    """Local update: every block minimises its cost plus ``lam'x + rho/2 |x - z|^2`` over its copies."""
    solvers = solvers or _Solvers(subs, layout, config)
    linear = []
    for s, lam in zip(solvers.blocks, state.lam):
        c = s.problem.c.copy()
        sc = layout.scale[s.globals_]
        np.add.at(c, s.copies, (lam - config.rho * state.z[s.globals_]) / sc)
        linear.append(c)
    state.x = solvers.solve(linear)
    return state


def global_update(state: ConsensusState, subs: SubproblemSet, layout: ConsensusLayout) -> ConsensusState:
    """Global update: each global becomes the mean of its live copies."""
    total = np.zeros(len(layout.keys))
    for s, x in zip(subs.all(), state.x):
        np.add.at(total, s.globals_, x[s.copies] / layout.scale[s.globals_])
    state.z = total / layout.copy_count
    return state


def dual_update(state: ConsensusState, subs: SubproblemSet, layout: ConsensusLayout,
                config: AdmmConfig) -> ConsensusState:
    """Dual update: ``lam += rho * (local copy - global)``."""
    for b, (s, x) in enumerate(zip(subs.all(), state.x)):
        y = x[s.copies] / layout.scale[s.globals_]
        state.lam[b] = state.lam[b] + config.rho * (y - state.z[s.globals_])
    return state


def primal_residual(state: ConsensusState, subs: SubproblemSet, layout: ConsensusLayout) -> float:
    """Euclidean norm of all copy-minus-global gaps, in consensus units."""
    total = 0.0
    for s, x in zip(subs.all(), state.x):
        total += float(((x[s.copies] / layout.scale[s.globals_] - state.z[s.globals_]) ** 2).sum())
    return float(np.sqrt(total))


def admm_objective(subs: SubproblemSet, xs: list) -> float:
    """Sum of every block's own cost at its local solution (no penalty terms)."""
    return float(sum(s.problem.objective(x) for s, x in zip(subs.all(), xs)))


@dataclass(frozen=True)
class AdmmTraceRow:
    iteration: int
    objective: float
    primal_residual: float
    dual_residual: float
    wall_time: float


@dataclass
class AdmmResult:
    control: ControlAction
    objective: float
    status: QpStatus
    iterations: int
    trace: list
    state: ConsensusState

    @property
    def converged(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _objective_settled(new: float, old: float, tol: float) -> bool:
    if not np.isfinite(old):
        return False
    if abs(new) < 1e-12:
        return abs(new - old) <= tol * 1e-12
    return 100.0 * abs((new - old) / new) <= tol


def run_admm(agg: AggregatedModelHandle, config: AdmmConfig = AdmmConfig(),
             split=None) -> AdmmResult:
    """Alternate local, global and dual updates until convergence or ``max_iters``.

    Parameters
    ----------
    agg : AggregatedModelHandle
    config : AdmmConfig
    split : tuple, optional
        Precomputed ``split_consensus(agg)``.

    Returns
    -------
    AdmmResult
        ``control`` is read from the balance block's shared first-stage
        variables; ``status`` is Optimal on convergence, IterLimit otherwise.

    Notes
    -----
    The run stops once the objective change is within ``obj_tol`` percent
    and the primal residual is within ``residual_tol`` of ``|z|``. An
    infinite ``obj_tol`` stops after the first iteration.
    """
    subs, layout = split or split_consensus(agg)
    layout = replace(layout, scale=consensus_scale(layout, config))
    solvers = _Solvers(subs, layout, config)
    state = ConsensusState.zeros(subs, layout)
    trace = []
    prev = np.inf
    t0 = time.perf_counter()
    status = QpStatus.ITER_LIMIT
    for i in range(config.max_iters):
        z_old = state.z.copy()
        local_update(state, subs, layout, config, solvers)
        global_update(state, subs, layout)
        dual_update(state, subs, layout, config)
        state.iteration = i + 1
        f = admm_objective(subs, state.x)
        state.objective.append(f)
        r_p = primal_residual(state, subs, layout)
        r_d = config.rho * float(np.sqrt(layout.copy_count @ (state.z - z_old) ** 2))
        trace.append(AdmmTraceRow(i + 1, f, r_p, r_d, time.perf_counter() - t0))
        z_norm = max(float(np.linalg.norm(state.z)), 1e-12)
        lam_norm = max(float(np.sqrt(sum(lam @ lam for lam in state.lam))), 1e-12)
        if np.isinf(config.obj_tol) or (_objective_settled(f, prev, config.obj_tol)
                                        and r_p <= config.residual_tol * z_norm
                                        and r_d <= config.dual_tol * lam_norm):
            status = QpStatus.OPTIMAL
            break
        prev = f

    bal = subs.balance
    xb = state.x[0]
    N = layout.num_plants
    u_tr = np.array([xb[bal.keys.index(VarKey("u_tr", n, None, None))] for n in range(N)])
    u_br = np.array([xb[bal.keys.index(VarKey("u_br", n, None, None))] for n in range(N)])
    return AdmmResult(ControlAction(u_tr, u_br), state.objective[-1], status,
                      state.iteration, trace, state)


def write_trace(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "objective", "primal_residual", "dual_residual", "wall_time"])
        for row in trace:
            out.writerow([row.iteration, repr(row.objective), repr(row.primal_residual),
                          repr(row.dual_residual), f"{row.wall_time:.6f}"])
