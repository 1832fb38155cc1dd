"""
Certified controller: aggregation refinement with upper and lower bounds.

Each outer iteration solves the aggregated model with ``R`` representative
periods (lower bound), fixes its first-stage discharges in the full model
(upper bound, one QP per scenario), and refines ``R`` until the relative
gap closes. Once ``R`` reaches the horizon the exact model is solved and
the gap is zero by construction.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .admm import AdmmConfig, run_admm, thread_count
from .aggregation import TAIL_MODELS, build_aggregated_model, build_tail_map
from .model import (CascadeInstance, ControlAction, InputError, MarketAndObjective,
                    RollingState, ScenarioSet, build_full_model)
from .qp import solve

LB_SOURCES = ("admm", "direct")
CONTROLLERS = ("full", "aggregated", "distributed")


@dataclass(frozen=True)
class AlgoConfig:
    """Outer-loop settings.

    ``gap_tol`` and ``obj_tol`` are percentages. ``lb_source`` chooses how
    the lower bound is computed: ``"admm"`` (the distributed routine) or
    ``"direct"`` (a centralized solve of the aggregated model). ``obj_tol``
    overrides the ADMM stopping threshold.
    """

    alpha: float = 10.0
    gap_tol: float = 1.0
    obj_tol: float = 1e-3
    R0: int = 7
    gamma: int = 7
    J: int = 12
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    lb_source: str = "admm"
    tail_model: str = "certified"
    tol: float = 1e-10

    def __post_init__(self):
        if self.R0 < 1 or self.gamma < 1 or self.J < 1:
            raise InputError("algorithm: R0, gamma and J must be at least 1")
        if not self.gap_tol > 0:
            raise InputError("algorithm: gap_tol must be positive")
        if self.lb_source not in LB_SOURCES:
            raise InputError(f"algorithm: lb_source must be one of {LB_SOURCES}")
        if self.tail_model not in TAIL_MODELS:
            raise InputError(f"algorithm: tail_model must be one of {TAIL_MODELS}")
        if self.admm.obj_tol != self.obj_tol:
            object.__setattr__(self, "admm", replace(self.admm, obj_tol=self.obj_tol))

    @classmethod
    def desk(cls, horizon: int = 90, **overrides) -> "AlgoConfig":
        """Initial count and increment scaled to the horizon: ``ceil(K / 14)``."""
        step = max(2, math.ceil(horizon / 14))
        return cls(**{"R0": step, "gamma": step, **overrides})


@dataclass(frozen=True)
class BoundsRow:
    j: int
    R: int
    lower: float
    upper: float
    projected: float
    gap: float                 # percent; nan when the lower bound is heuristic
    admm_iterations: int
    certified: bool
    lb_time: float
    ub_time: float


@dataclass
class BoundsRecord:
    rows: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def final(self) -> BoundsRow:
        return self.rows[-1]


@dataclass(frozen=True)
class AlgoResult:
    upper: float
    lower: float
    control: ControlAction
    record: BoundsRecord

    @property
    def gap(self) -> float:
        return self.record.final.gap


def relative_gap(upper: float, lower: float) -> float:
    """``100 (UB - LB) / max(|UB|, 1e-9)``; infinite while no upper bound exists."""
    if not np.isfinite(upper):
        return math.inf
    return 100.0 * (upper - lower) / max(abs(upper), 1e-9)


def project_upper_bound(instance: CascadeInstance, scenarios: ScenarioSet,
                        market: MarketAndObjective, state: RollingState,
                        u_fixed: ControlAction, tol: float = 1e-10) -> tuple[float, np.ndarray]:
    """Full-model cost of committing to ``u_fixed``.

    With the first stage pinned the scenarios decouple, so each is solved
    on its own (concurrently up to ``CASCADE_THREADS``) and the objectives
    summed. An infeasible scenario makes the bound infinite.

    Returns
    -------
    (float, ndarray)
        Total and per-scenario objectives.
    """
    def one(w):
        h = build_full_model(instance, scenarios.subset(w), market, state, fixed_u=u_fixed)
        sol = solve(h.problem, tol=tol)
        return sol.objective if sol.ok else math.inf

    W = scenarios.num_scenarios
    workers = min(thread_count(), W)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = np.array(list(pool.map(one, range(W))))
    else:
        parts = np.array([one(w) for w in range(W)])
    return float(parts.sum()), parts


def _solve_exact(instance, scenarios, market, state, tol):
    h = build_full_model(instance, scenarios, market, state)
    sol = solve(h.problem, tol=tol)
    if not sol.ok:
        raise InputError(f"full model not solvable ({sol.status.value})")
    return sol.objective, h.control(sol.primal)


def run_algorithm1(instance: CascadeInstance, scenarios: ScenarioSet,
                   market: MarketAndObjective, state: RollingState,
                   config: AlgoConfig = AlgoConfig()) -> AlgoResult:
    """Refine the aggregation until the certified gap drops below ``gap_tol``.

    Parameters
    ----------
    instance, scenarios, market, state
        Model data for the current window.
    config : AlgoConfig

    Returns
    -------
    AlgoResult
        Final bounds, the first-stage action that attains the upper bound,
        and one :class:`BoundsRow` per outer iteration.

    Notes
    -----
    When the count reaches the horizon the full model is solved directly;
    both bounds then equal its optimum. A lower bound from an ADMM run that
    hit its iteration cap is flagged uncertified and cannot end the loop.
    """
    K = scenarios.horizon
    if config.R0 > K:
        raise InputError(f"algorithm: R0={config.R0} exceeds the horizon {K}")
    market = replace(market, alpha=config.alpha)
    record = BoundsRecord()
    upper, best_u = math.inf, None
    R = config.R0
    for j in range(config.J):
        R = min(R, K)
        t0 = time.perf_counter()
        iters, certified = 0, True
        if R == K:
            lower, u = _solve_exact(instance, scenarios, market, state, config.tol)
            t1 = time.perf_counter()
            projected = lower
        else:
            agg = build_aggregated_model(instance, scenarios, market, state,
                                         build_tail_map(K, R), config.tail_model)
            if config.lb_source == "admm":
                res = run_admm(agg, config.admm)
                lower, u, iters = res.objective, res.control, res.iterations
                certified = res.converged
            else:
                sol = solve(agg.problem, tol=config.tol)
                if not sol.ok:
                    raise InputError(f"aggregated model not solvable ({sol.status.value})")
                lower, u = sol.objective, agg.control(sol.primal)
            t1 = time.perf_counter()
            projected, _ = project_upper_bound(instance, scenarios, market, state, u, config.tol)
        if projected < upper:
            upper, best_u = projected, u
        if best_u is None:
            best_u = u
        gap = relative_gap(upper, lower) if certified else math.nan
        record.rows.append(BoundsRow(j, R, lower, upper, projected, gap, iters, certified,
                                     t1 - t0, time.perf_counter() - t1))
        if R == K or (certified and gap <= config.gap_tol):
            break
        R += config.gamma
    final = record.final
    return AlgoResult(upper, final.lower, best_u, record)


@dataclass(frozen=True)
class StepResult:
    control: ControlAction
    result: Optional[AlgoResult]
    wall_time: float


def mpc_step(controller: str, instance: CascadeInstance, scenarios: ScenarioSet,
             market: MarketAndObjective, state: RollingState,
             config: AlgoConfig = AlgoConfig()) -> StepResult:
    """One receding-horizon decision.

    ``controller`` is ``"full"`` (centralized full-scale solve),
    ``"aggregated"`` (bounded refinement with centralized lower bounds) or
    ``"distributed"`` (bounded refinement with ADMM lower bounds). Only
    the first-period action is returned for implementation.
    """
    if controller not in CONTROLLERS:
        raise InputError(f"unknown controller {controller!r}; choose from {CONTROLLERS}")
    t0 = time.perf_counter()
    if controller == "full":
        _, u = _solve_exact(instance, scenarios, replace(market, alpha=config.alpha), state,
                            config.tol)
        return StepResult(u, None, time.perf_counter() - t0)
    cfg = replace(config, lb_source="direct" if controller == "aggregated" else "admm")
    res = run_algorithm1(instance, scenarios, market, state, cfg)
    return StepResult(res.control, res, time.perf_counter() - t0)


BOUNDS_COLUMNS = ("t", "j", "R", "F_LB", "F_UB", "F_PRJ", "eps", "admm_iterations",
                  "certified", "lb_time", "ub_time")


def bounds_rows(record: BoundsRecord, t: int = 0, timing: bool = True) -> list[list]:
    """CSV rows of ``record``; ``timing=False`` drops the two wall-time columns."""
    rows = []
    for r in record:
        row = [t, r.j, r.R, *(repr(float(v)) for v in (r.lower, r.upper, r.projected, r.gap)),
               r.admm_iterations, int(r.certified)]
        if timing:
            row += [f"{r.lb_time:.6f}", f"{r.ub_time:.6f}"]
        rows.append(row)
    return rows


def write_bounds(record: BoundsRecord, path, t: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(BOUNDS_COLUMNS)
        out.writerows(bounds_rows(record, t))
