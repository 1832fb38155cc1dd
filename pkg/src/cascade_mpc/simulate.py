"""
Closed-loop simulation and controller benchmarking.

At each period the controller sees fresh forecast scenarios, returns a
first-period action, and the plant evolves under the *realized* inflows,
renewable output and prices. Reservoir levels follow the mass balance;
power follows the hydropower equation at the end-of-period head; the
energy imbalance against the fixed offer is settled at realized prices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .admm import AdmmConfig
from .bounds import CONTROLLERS, AlgoConfig, bounds_rows, mpc_step, BOUNDS_COLUMNS
from .model import (CascadeInstance, ControlAction, InputError, MarketAndObjective,
                    RollingState, hydropower_power)
from .scenarios import GeneratorSpec, Realization, generate_scenarios, realize


@dataclass(frozen=True)
class SimConfig:
    """Episode settings.

    ``initial_levels`` and ``level_ref`` accept ``"min"``, ``"mid"``,
    ``"max"`` or one value per plant. ``offer_mw`` is the constant hourly
    commitment, converted to energy per period inside the model.
    """

    episode: int = 120
    horizon: int = 90
    scenarios: int = 8
    seed: int = 0
    controller: str = "distributed"
    offer_mw: float = 165.0
    initial_levels: object = "min"
    level_ref: object = "mid"
    algo: AlgoConfig = field(default_factory=AlgoConfig.desk)
    generator: Optional[GeneratorSpec] = None

    def __post_init__(self):
        if self.episode < 1 or self.horizon < 1 or self.scenarios < 1:
            raise InputError("config: 'episode', 'horizon' and 'scenarios' must be at least 1")
        if self.controller not in CONTROLLERS:
            raise InputError(f"config: 'controller' must be one of {CONTROLLERS}")

    def generator_for(self, instance: CascadeInstance) -> GeneratorSpec:
        gen = self.generator or GeneratorSpec.desk(instance)
        if len(gen.inflow) != instance.num_plants:
            raise InputError("config: generator needs one inflow process per plant")
        return gen


def _plant_values(spec, instance: CascadeInstance, name: str) -> np.ndarray:
    if isinstance(spec, str):
        attr = {"min": "level_min", "max": "level_max", "mid": "level_mid"}.get(spec)
        if attr is None:
            raise InputError(f"config: '{name}' must be 'min', 'mid', 'max' or a list")
        return np.array([getattr(p, attr) for p in instance.plants])
    arr = np.asarray(spec, float)
    if arr.shape != (instance.num_plants,):
        raise InputError(f"config: '{name}' needs one value per plant")
    return arr


@dataclass
class EpisodeLog:
    """Per-period record of one closed-loop run; arrays are ``[t]`` or ``[t, plant]``."""

    q_tr: np.ndarray
    q_br: np.ndarray
    level: np.ndarray
    head: np.ndarray
    p_h: np.ndarray
    inflow: np.ndarray          # total arrivals per plant (external plus routed)
    d_up: np.ndarray
    d_dn: np.ndarray
    cost: np.ndarray
    violation: np.ndarray       # bool [t, plant], level clamped
    wall_time: np.ndarray
    bounds: list                # BoundsRecord or None per t
    realization: Realization
    sampling: float
    offer: float                # MWh per period

    def __len__(self) -> int:
        return self.cost.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.cost.sum())

    @property
    def mean_step_time(self) -> float:
        return float(self.wall_time.mean())

    def episode_rows(self) -> tuple[list, list]:
        N = self.level.shape[1]
        header = ["t"]
        for n in range(N):
            header += [f"q_tr_{n}", f"q_br_{n}", f"level_{n}", f"p_h_{n}"]
        header += ["d_up", "d_dn", "cost", "violation"]
        rows = []
        for t in range(len(self)):
            row = [t]
            for n in range(N):
                row += [repr(float(v)) for v in (self.q_tr[t, n], self.q_br[t, n],
                                                 self.level[t, n], self.p_h[t, n])]
            row += [repr(float(self.d_up[t])), repr(float(self.d_dn[t])),
                    repr(float(self.cost[t])), int(self.violation[t].any())]
            rows.append(row)
        return header, rows

    def write(self, out_dir) -> dict:
        """Write ``episode.csv``, ``bounds.csv``, ``summary.json`` and the timing files.

        Everything except ``timing.csv`` and ``bounds_timing.csv`` is a
        deterministic function of instance, configuration and seed.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header, rows = self.episode_rows()
        _write_csv(out / "episode.csv", header, rows)
        _write_csv(out / "timing.csv", ["t", "wall_time"],
                   [[t, f"{w:.6f}"] for t, w in enumerate(self.wall_time)])
        brows, trows = [], []
        for t, rec in enumerate(self.bounds):
            if rec is not None:
                brows += bounds_rows(rec, t, timing=False)
                trows += [[t, r.j, f"{r.lb_time:.6f}", f"{r.ub_time:.6f}"] for r in rec]
        _write_csv(out / "bounds.csv", BOUNDS_COLUMNS[:-2], brows)
        _write_csv(out / "bounds_timing.csv", ["t", "j", "lb_time", "ub_time"], trows)
        summary = {"periods": len(self), "total_cost": self.total_cost,
                   "violations": int(self.violation.sum())}
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        return summary


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def settle(offer: float, vres_mw: float, powers_mw, price_up: float, price_down: float,
           dt_h: float) -> tuple[float, float, float]:
    """Imbalance against the offer (MWh) and its cost at the given prices."""
    short = offer - vres_mw * dt_h - float(np.sum(powers_mw)) * dt_h
    d_up, d_dn = max(short, 0.0), max(-short, 0.0)
    return d_up, d_dn, price_up * d_up - price_down * d_dn


def plant_step(instance: CascadeInstance, state: RollingState, u: ControlAction,
               ext_inflow: np.ndarray):
    """Propagate levels one period under realized inflows.

    Returns ``(levels, heads, powers, arrivals, violated)``. Levels leaving
    their bounds are clamped and flagged.
    """
    N = instance.num_plants
    dt = instance.sampling
    levels = np.empty(N)
    arrivals = np.empty(N)
    violated = np.zeros(N, bool)
    for n, p in enumerate(instance.plants):
        qin = float(ext_inflow[n])
        if n > 0:
            for kind, d, now in zip(("q_tr", "q_br"), instance.delays(n - 1),
                                    (u.q_tr[n - 1], u.q_br[n - 1])):
                qin += now if d == 0 else state.past(kind, n - 1, d)
        arrivals[n] = qin
        lvl = state.levels[n] + (qin - u.q_tr[n] - u.q_br[n]) * dt / p.surface_area
        if not p.level_min - 1e-9 <= lvl <= p.level_max + 1e-9:
            violated[n] = True
            lvl = min(max(lvl, p.level_min), p.level_max)
        levels[n] = lvl
    heads = levels - np.array([p.tailrace for p in instance.plants])
    powers = np.array([
        min(max(hydropower_power(instance, n, u.q_tr[n], heads[n]), p.power_min), p.power_max)
        for n, p in enumerate(instance.plants)])
    return levels, heads, powers, arrivals, violated


def _feasible_action(instance: CascadeInstance, state: RollingState, u: ControlAction) -> ControlAction:
    """Clip an action into the discharge box and the ramp window."""
    tr = np.empty(instance.num_plants)
    br = np.empty(instance.num_plants)
    for n, p in enumerate(instance.plants):
        last = state.past("q_tr", n, 1)
        lo = max(p.turbine_min, last - p.ramp_limit)
        hi = min(p.turbine_max, last + p.ramp_limit)
        tr[n] = min(max(u.q_tr[n], lo), hi)
        br[n] = max(u.q_br[n], p.barrage_min)
    return ControlAction(tr, br)


def first_window(instance: CascadeInstance, config: SimConfig):
    """Scenarios, market and state of the first control step of an episode."""
    gen = config.generator_for(instance)
    real = realize(gen, config.horizon + 1, instance.sampling, config.seed)
    scen = generate_scenarios(gen, real, 0, config.horizon, config.scenarios,
                              instance.sampling, config.seed)
    levels = _plant_values(config.initial_levels, instance, "initial_levels")
    ref = _plant_values(config.level_ref, instance, "level_ref")
    state = RollingState.steady(instance, levels, real.ext_inflow[:, 0])
    market = MarketAndObjective.constant(instance, config.horizon, config.offer_mw,
                                         config.algo.alpha, ref)
    return scen, market, state


def simulate(instance: CascadeInstance, config: SimConfig = SimConfig(),
             progress=None) -> EpisodeLog:
    """Run one closed-loop episode.

    Parameters
    ----------
    instance : CascadeInstance
    config : SimConfig
    progress : callable, optional
        Called as ``progress(t, wall_time)`` after every period.
    """
    T, K, W = config.episode, config.horizon, config.scenarios
    gen = config.generator_for(instance)
    real = realize(gen, T + K, instance.sampling, config.seed)
    N = instance.num_plants
    levels0 = _plant_values(config.initial_levels, instance, "initial_levels")
    ref = _plant_values(config.level_ref, instance, "level_ref")
    state = RollingState.steady(instance, levels0, real.ext_inflow[:, 0])
    state.validate(instance)
    market = MarketAndObjective.constant(instance, K, config.offer_mw, config.algo.alpha, ref)
    dt_h = instance.hours

    arr = {k: np.zeros((T, N)) for k in ("q_tr", "q_br", "level", "head", "p_h", "inflow")}
    d_up, d_dn, cost, wall = (np.zeros(T) for _ in range(4))
    violation = np.zeros((T, N), bool)
    bounds = []
    for t in range(T):
        scen = generate_scenarios(gen, real, t, K, W, instance.sampling, config.seed)
        step = mpc_step(config.controller, instance, scen, market, state, config.algo)
        u = _feasible_action(instance, state, step.control)
        levels, heads, powers, arrivals, violated = plant_step(
            instance, state, u, real.ext_inflow[:, t])
        d_up[t], d_dn[t], cost[t] = settle(market.offer[0], real.vres_power[t], powers,
                                           real.price_up[t], real.price_down[t], dt_h)
        for key, val in (("q_tr", u.q_tr), ("q_br", u.q_br), ("level", levels),
                         ("head", heads), ("p_h", powers), ("inflow", arrivals)):
            arr[key][t] = val
        violation[t] = violated
        wall[t] = step.wall_time
        bounds.append(step.result.record if step.result is not None else None)
        state = RollingState(levels, np.column_stack([state.hist_tr[:, 1:], u.q_tr]),
                             np.column_stack([state.hist_br[:, 1:], u.q_br]))
        if progress is not None:
            progress(t, step.wall_time)
    return EpisodeLog(**arr, d_up=d_up, d_dn=d_dn, cost=cost, violation=violation,
                      wall_time=wall, bounds=bounds, realization=real,
                      sampling=instance.sampling, offer=float(market.offer[0]))


@dataclass(frozen=True)
class BenchRow:
    controller: str
    mean_step_time: float
    total_cost: float
    mean_gap: float            # percent over certified final gaps; nan for the full controller
    speedup: float             # percent, relative to the first controller


def benchmark(instance: CascadeInstance, config: SimConfig, controllers=("full", "distributed"),
              progress=None) -> list[BenchRow]:
    """Run each controller on the same instance, seed and realization, one after another."""
    controllers = list(controllers)
    if len(controllers) < 2:
        raise InputError("bench: need at least two controllers")
    logs = []
    for c in controllers:
        logs.append(simulate(instance, replace(config, controller=c), progress))
    base = logs[0].mean_step_time
    rows = []
    for c, log in zip(controllers, logs):
        gaps = [rec.final.gap for rec in log.bounds if rec is not None and rec.final.certified]
        rows.append(BenchRow(c, log.mean_step_time, log.total_cost,
                             float(np.mean(gaps)) if gaps else math.nan,
                             100.0 * (base - log.mean_step_time) / base))
    return rows


def write_bench(rows: list[BenchRow], path) -> None:
    _write_csv(path, ["controller", "mean_step_time", "total_cost", "mean_gap", "speedup_pct"],
               [[r.controller, f"{r.mean_step_time:.6f}", repr(r.total_cost), repr(r.mean_gap),
                 f"{r.speedup:.2f}"] for r in rows])


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

def config_to_dict(config: SimConfig) -> dict:
    algo = asdict(config.algo)
    return {
        "episode": config.episode, "horizon": config.horizon, "scenarios": config.scenarios,
        "seed": config.seed, "controller": config.controller, "offer_mw": config.offer_mw,
        "initial_levels": config.initial_levels, "level_ref": config.level_ref,
        "algorithm": algo,
        "generator": None if config.generator is None else config.generator.to_dict(),
    }


def config_from_dict(data: dict) -> SimConfig:
    """Parse a configuration mapping; unknown keys are rejected by name."""
    data = dict(data)
    algo_data = dict(data.pop("algorithm", {}) or {})
    admm_data = dict(algo_data.pop("admm", {}) or {})
    gen_data = data.pop("generator", None)
    sim_fields = set(SimConfig.__dataclass_fields__) - {"algo", "generator"}
    for name, given, allowed in (("config", data, sim_fields),
                                 ("config.algorithm", algo_data, set(AlgoConfig.__dataclass_fields__) - {"admm"}),
                                 ("config.algorithm.admm", admm_data, set(AdmmConfig.__dataclass_fields__))):
        unknown = sorted(set(given) - allowed)
        if unknown:
            raise InputError(f"{name}: unknown field(s) {unknown}")
    try:
        admm = AdmmConfig(**admm_data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config.algorithm.admm: {exc}") from None
    horizon = int(data.get("horizon", SimConfig.horizon))
    try:
        algo = AlgoConfig.desk(horizon, **{**algo_data, "admm": admm})
    except TypeError as exc:
        raise InputError(f"config.algorithm: {exc}") from None
    generator = GeneratorSpec.from_dict(gen_data) if gen_data else None
    try:
        return SimConfig(**data, algo=algo, generator=generator)
    except TypeError as exc:
        raise InputError(f"config: {exc}") from None


def load_config(path) -> SimConfig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path}: invalid JSON ({exc})") from None
    return config_from_dict(data)
