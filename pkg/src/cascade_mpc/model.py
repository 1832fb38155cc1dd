"""
Cascaded hydropower + vRES dispatch model.

Domain types for the plant cascade, the scenario forecasts and the rolling
controller state, plus the builder that emits the centralized full-scale
stochastic MPC problem as a :class:`~cascade_mpc.qp.QpProblem`.

Units: levels and heads in m, discharges in m3/s, power in MW, energy in
MWh, prices in EUR/MWh, the sampling time in seconds. The energy balance
converts power to energy with the sampling time expressed in hours.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .qp import INF, QpProblem, RowBuilder, VariableRegistry, assemble

PLANT_SYMBOLS = ("p_h", "l", "q_tr", "q_br", "h")
SYSTEM_SYMBOLS = ("d_up", "d_dn")


class InputError(ValueError):
    """Invalid or inconsistent model input; the message names the field."""


class VarKey(NamedTuple):
    kind: str
    n: Optional[int]
    w: Optional[int]
    k: Optional[int]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantParams:
    """Physical parameters of one plant.

    ``delay_turbine``/``delay_barrage`` are the travel times (s) of water
    released by this plant to the next reservoir downstream; they are unused
    for the last plant of the cascade.
    """

    surface_area: float
    level_min: float
    level_max: float
    tailrace: float
    turbine_min: float
    turbine_max: float
    barrage_min: float
    power_min: float
    power_max: float
    efficiency: float
    ramp_limit: float
    delay_turbine: float = 0.0
    delay_barrage: float = 0.0
    name: str = ""

    def __post_init__(self):
        checks = [
            ("surface_area", self.surface_area > 0),
            ("level_max", self.level_min <= self.level_max),
            ("tailrace", self.tailrace <= self.level_min),
            ("turbine_max", 0 <= self.turbine_min <= self.turbine_max),
            ("barrage_min", self.barrage_min >= 0),
            ("power_max", self.power_min <= self.power_max),
            ("efficiency", 0 < self.efficiency <= 1),
            ("ramp_limit", self.ramp_limit >= 0),
            ("delay_turbine", self.delay_turbine >= 0),
            ("delay_barrage", self.delay_barrage >= 0),
        ]
        for fname, ok in checks:
            if not ok:
                raise InputError(f"plant {self.name or '?'}: invalid field '{fname}'")

    @property
    def head_min(self) -> float:
        return self.level_min - self.tailrace

    @property
    def head_max(self) -> float:
        return self.level_max - self.tailrace

    @property
    def level_mid(self) -> float:
        return 0.5 * (self.level_min + self.level_max)


@dataclass(frozen=True)
class CascadeInstance:
    plants: tuple[PlantParams, ...]
    sampling: float = 120.0
    water_density: float = 1000.0
    gravity: float = 9.81

    def __post_init__(self):
        object.__setattr__(self, "plants", tuple(self.plants))
        if not self.plants:
            raise InputError("instance: 'plants' must contain at least one plant")
        if not self.sampling > 0:
            raise InputError("instance: 'sampling' must be positive")

    @property
    def num_plants(self) -> int:
        return len(self.plants)

    @property
    def hours(self) -> float:
        """Sampling time in hours (power-to-energy factor)."""
        return self.sampling / 3600.0

    def power_coefficient(self, n: int) -> float:
        return 1e-6 * self.water_density * self.gravity * self.plants[n].efficiency

    def delays(self, n: int) -> tuple[int, int]:
        """(turbine, barrage) delays in periods from plant ``n`` to ``n + 1``."""
        p = self.plants[n]
        return (delay_to_periods(p.delay_turbine, self.sampling),
                delay_to_periods(p.delay_barrage, self.sampling))

    def max_delay(self) -> int:
        return max((max(self.delays(n)) for n in range(self.num_plants - 1)), default=0)


@dataclass(frozen=True)
class ScenarioSet:
    """Equally weighted forecast scenarios.

    Arrays are indexed ``[scenario, plant, period]`` for inflows and
    ``[scenario, period]`` otherwise.
    """

    ext_inflow: np.ndarray
    vres_power: np.ndarray
    price_up: np.ndarray
    price_down: np.ndarray

    def __post_init__(self):
        for name in ("ext_inflow", "vres_power", "price_up", "price_down"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.ext_inflow.ndim != 3:
            raise InputError("scenarios: 'ext_inflow' must be [scenario, plant, period]")
        shape = (self.ext_inflow.shape[0], self.ext_inflow.shape[2])
        for name in ("vres_power", "price_up", "price_down"):
            if getattr(self, name).shape != shape:
                raise InputError(f"scenarios: '{name}' must have shape {shape}")
        if np.any(self.ext_inflow < 0):
            raise InputError("scenarios: 'ext_inflow' must be nonnegative")
        if np.any(self.price_down < 0) or np.any(self.price_up < self.price_down):
            raise InputError("scenarios: prices must satisfy price_up >= price_down >= 0")

    @property
    def num_scenarios(self) -> int:
        return self.ext_inflow.shape[0]

    @property
    def num_plants(self) -> int:
        return self.ext_inflow.shape[1]

    @property
    def horizon(self) -> int:
        return self.ext_inflow.shape[2]

    def subset(self, scenarios) -> "ScenarioSet":
        idx = np.atleast_1d(scenarios)
        return ScenarioSet(self.ext_inflow[idx], self.vres_power[idx],
                           self.price_up[idx], self.price_down[idx])


@dataclass(frozen=True)
class MarketAndObjective:
    """Fixed energy offer (MWh per period), level references and tracking weight."""

    offer: np.ndarray
    level_ref: np.ndarray
    alpha: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "offer", np.asarray(self.offer, dtype=float))
        object.__setattr__(self, "level_ref", np.asarray(self.level_ref, dtype=float))
        if self.alpha < 0:
            raise InputError("market: 'alpha' must be nonnegative")

    @classmethod
    def constant(cls, instance: CascadeInstance, horizon: int, offer_mw: float,
                 alpha: float = 10.0, level_ref=None) -> "MarketAndObjective":
        """Constant hourly offer ``offer_mw`` converted to energy per period."""
        if level_ref is None:
            level_ref = [p.level_mid for p in instance.plants]
        ref = np.repeat(np.asarray(level_ref, float)[:, None], horizon, axis=1)
        return cls(np.full(horizon, offer_mw * instance.hours), ref, alpha)

    def window(self, start: int, length: int) -> "MarketAndObjective":
        return replace(self, offer=self.offer[start:start + length],
                       level_ref=self.level_ref[:, start:start + length])


@dataclass(frozen=True)
class RollingState:
    """Current reservoir levels and recently implemented discharges.

    ``hist_tr[n, -1]`` is the turbine discharge of plant ``n`` during the
    previous period, ``hist_tr[n, -2]`` the one before, and so on.
    """

    levels: np.ndarray
    hist_tr: np.ndarray
    hist_br: np.ndarray

    def __post_init__(self):
        for name in ("levels", "hist_tr", "hist_br"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.hist_tr.ndim != 2 or self.hist_tr.shape != self.hist_br.shape:
            raise InputError("state: discharge histories must be equal-shape 2-D arrays")
        if self.hist_tr.shape[1] < 1:
            raise InputError("state: discharge history needs at least one period")

    @classmethod
    def steady(cls, instance: CascadeInstance, levels, inflow, depth: Optional[int] = None):
        """Equilibrium start: every plant has been releasing ``inflow`` (per plant)."""
        depth = max(1, instance.max_delay()) if depth is None else depth
        flows = np.asarray(inflow, float)
        tr = np.empty((instance.num_plants, depth))
        br = np.empty_like(tr)
        for n, p in enumerate(instance.plants):
            # total upstream arrivals at equilibrium
            total = flows[: n + 1].sum()
            b = p.barrage_min
            t = float(np.clip(total - b, p.turbine_min, p.turbine_max))
            tr[n], br[n] = t, max(b, total - t)
        return cls(np.asarray(levels, float), tr, br)

    def past(self, kind: str, n: int, lag: int) -> float:
        """Discharge of plant ``n`` ``lag >= 1`` periods ago."""
        hist = self.hist_tr if kind == "q_tr" else self.hist_br
        if lag > hist.shape[1]:
            raise InputError(f"state: discharge history shorter than delay {lag}")
        return float(hist[n, -lag])

    def validate(self, instance: CascadeInstance) -> None:
        if self.levels.shape != (instance.num_plants,):
            raise InputError("state: 'levels' must have one entry per plant")
        for n, p in enumerate(instance.plants):
            if not p.level_min - 1e-9 <= self.levels[n] <= p.level_max + 1e-9:
                raise InputError(f"state: level of plant {n} outside its bounds")
        if self.hist_tr.shape[0] != instance.num_plants:
            raise InputError("state: discharge history must have one row per plant")
        if self.hist_tr.shape[1] < instance.max_delay():
            raise InputError("state: discharge history shorter than the maximum delay")


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def delay_to_periods(tau: float, delta: float) -> int:
    """Travel time ``tau`` (s) as a whole number of periods, rounding half up."""
    if tau < 0 or delta <= 0:
        raise InputError("delay_to_periods: need tau >= 0 and delta > 0")
    return int(math.floor(tau / delta + 0.5))


def hydropower_power(instance: CascadeInstance, n: int, q_tr, head):
    """Exact bilinear generation ``C_n * q_tr * head`` in MW."""
    return instance.power_coefficient(n) * np.asarray(q_tr) * np.asarray(head)


@dataclass(frozen=True)
class EnvelopeRow:
    """``sense * (p/C - a_h * h - a_q * q) >= sense * const``.

    ``sense`` is +1 for an under-estimator (p/C >= ...) and -1 for an
    over-estimator (p/C <= ...).
    """

    a_h: float
    a_q: float
    const: float
    sense: int

    def bound(self, q, h):
        return self.a_h * h + self.a_q * q + self.const


def mccormick_rows(plant: PlantParams) -> tuple[EnvelopeRow, ...]:
    """The four McCormick rows for ``p/C = q_tr * h`` over the plant's box."""
    ql, qu = plant.turbine_min, plant.turbine_max
    hl, hu = plant.head_min, plant.head_max
    return (
        EnvelopeRow(ql, hl, -ql * hl, +1),
        EnvelopeRow(qu, hu, -qu * hu, +1),
        EnvelopeRow(ql, hu, -ql * hu, -1),
        EnvelopeRow(qu, hl, -qu * hl, -1),
    )


def envelope_interval(plant: PlantParams, q, h):
    """(lower, upper) McCormick bounds on ``p/C`` at ``(q, h)``."""
    rows = mccormick_rows(plant)
    lo = max(r.bound(q, h) for r in rows if r.sense > 0)
    hi = min(r.bound(q, h) for r in rows if r.sense < 0)
    return lo, hi


def emit_envelope(rows: RowBuilder, plant: PlantParams, C: float, ip: int, iq: int,
                  ih: int, tag: tuple = ()) -> None:
    """Append the four envelope rows in the scaled form ``p - C*(a_h h + a_q q) ~ C*const``.

    Rows are tagged ``("mccormick", *tag, j)``.
    """
    for j, r in enumerate(mccormick_rows(plant)):
        coeffs = ((ip, 1.0), (ih, -C * r.a_h), (iq, -C * r.a_q))
        rhs = C * r.const
        if r.sense > 0:
            rows.add(coeffs, rhs, INF, ("mccormick", *tag, j))
        else:
            rows.add(coeffs, -INF, rhs, ("mccormick", *tag, j))


def validate_inputs(instance: CascadeInstance, scenarios: ScenarioSet,
                    market: MarketAndObjective, state: RollingState, horizon: int) -> None:
    N = instance.num_plants
    if horizon < 1:
        raise InputError("horizon must be at least 1")
    if scenarios.num_plants != N:
        raise InputError(f"scenarios: 'ext_inflow' covers {scenarios.num_plants} plants, instance has {N}")
    if scenarios.horizon < horizon:
        raise InputError(f"scenarios: series length {scenarios.horizon} shorter than horizon {horizon}")
    if market.offer.shape[0] < horizon:
        raise InputError("market: 'offer' shorter than the horizon")
    if market.level_ref.shape[0] != N or market.level_ref.shape[1] < horizon:
        raise InputError("market: 'level_ref' must be [plant, period] covering the horizon")
    for n, p in enumerate(instance.plants):
        ref = market.level_ref[n, :horizon]
        if np.any(ref < p.level_min - 1e-9) or np.any(ref > p.level_max + 1e-9):
            raise InputError(f"market: 'level_ref' of plant {n} outside level bounds")
    if instance.max_delay() >= horizon:
        raise InputError("instance: a propagation delay is not shorter than the horizon")
    state.validate(instance)


# ---------------------------------------------------------------------------
# full-scale model
# ---------------------------------------------------------------------------

class ModelHandle:
    """A built QP together with its variable registry.

    First-period discharges are a single scenario-independent variable per
    plant (the shared control ``u``); :meth:`idx` resolves any
    ``(q_tr|q_br, n, w, 0)`` lookup to it.
    """

    def __init__(self, problem: QpProblem, registry: VariableRegistry,
                 num_plants: int, num_scenarios: int, num_periods: int):
        self.problem = problem
        self.registry = registry
        self.num_plants = num_plants
        self.num_scenarios = num_scenarios
        self.num_periods = num_periods

    def idx(self, kind: str, n=None, w=None, k=None) -> int:
        if kind in ("q_tr", "q_br") and k == 0:
            return self.registry[VarKey("u_" + kind[2:], n, None, None)]
        return self.registry[VarKey(kind, n, w, k)]

    def series(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Primal values reshaped: plant symbols ``[w, n, k]``, imbalances ``[w, k]``.

        Entries without a variable (imbalances of a relaxed cluster) are NaN.
        """
        N, W, K = self.num_plants, self.num_scenarios, self.num_periods
        out = {s: np.full((W, N, K), np.nan) for s in PLANT_SYMBOLS}
        out.update({s: np.full((W, K), np.nan) for s in SYSTEM_SYMBOLS})
        for w in range(W):
            for k in range(K):
                for n in range(N):
                    for s in PLANT_SYMBOLS:
                        out[s][w, n, k] = x[self.idx(s, n, w, k)]
                for s in SYSTEM_SYMBOLS:
                    if VarKey(s, None, w, k) in self.registry:
                        out[s][w, k] = x[self.idx(s, None, w, k)]
        return out

    def control(self, x: np.ndarray) -> "ControlAction":
        return ControlAction(
            np.array([x[self.idx("q_tr", n, 0, 0)] for n in range(self.num_plants)]),
            np.array([x[self.idx("q_br", n, 0, 0)] for n in range(self.num_plants)]),
        )


class FullModelHandle(ModelHandle):
    pass


@dataclass(frozen=True)
class ControlAction:
    """First-period turbine and barrage discharges per plant (m3/s)."""

    q_tr: np.ndarray
    q_br: np.ndarray

    def as_dict(self) -> dict:
        return {"q_tr": self.q_tr.tolist(), "q_br": self.q_br.tolist()}


def _register_controls(reg: VariableRegistry, instance: CascadeInstance, lb, ub,
                       fixed_u: Optional[ControlAction]) -> None:
    for n, p in enumerate(instance.plants):
        for kind, lo, hi in (("u_tr", p.turbine_min, p.turbine_max),
                             ("u_br", p.barrage_min, INF)):
            reg.register(VarKey(kind, n, None, None))
            if fixed_u is not None:
                val = (fixed_u.q_tr if kind == "u_tr" else fixed_u.q_br)[n]
                lo = hi = float(val)
            lb.append(lo)
            ub.append(hi)


def build_full_model(instance: CascadeInstance, scenarios: ScenarioSet,
                     market: MarketAndObjective, state: RollingState,
                     horizon: Optional[int] = None,
                     fixed_u: Optional[ControlAction] = None) -> FullModelHandle:
    """Centralized full-scale stochastic MPC problem over ``horizon`` periods.

    Parameters
    ----------
    instance, scenarios, market, state
        Model data; series are read from period 0 of the scenario set.
    horizon : int, optional
        Number of periods K. Defaults to the scenario length.
    fixed_u : ControlAction, optional
        Pins the shared first-period discharges (upper-bound projection).
    """
    K = scenarios.horizon if horizon is None else horizon
    validate_inputs(instance, scenarios, market, state, K)
    N, W = instance.num_plants, scenarios.num_scenarios
    dt, dt_h = instance.sampling, instance.hours

    reg = VariableRegistry()
    lb: list[float] = []
    ub: list[float] = []
    _register_controls(reg, instance, lb, ub, fixed_u)

    for w in range(W):
        for k in range(K):
            for n, p in enumerate(instance.plants):
                for s in PLANT_SYMBOLS:
                    if s in ("q_tr", "q_br") and k == 0:
                        continue
                    reg.register(VarKey(s, n, w, k))
                    if s == "p_h":
                        lo, hi = p.power_min, p.power_max
                    elif s == "l":
                        lo, hi = p.level_min, p.level_max
                    elif s == "q_tr":
                        lo, hi = p.turbine_min, p.turbine_max
                    elif s == "q_br":
                        lo, hi = p.barrage_min, INF
                    else:
                        lo, hi = -INF, INF
                    lb.append(lo)
                    ub.append(hi)
            for s in SYSTEM_SYMBOLS:
                reg.register(VarKey(s, None, w, k))
                lb.append(0.0)
                ub.append(INF)

    h = FullModelHandle(None, reg, N, W, K)
    rows = RowBuilder()
    quad = np.zeros(len(reg))
    lin = np.zeros(len(reg))
    offset = 0.0

    for w in range(W):
        for n, p in enumerate(instance.plants):
            C = instance.power_coefficient(n)
            step = dt / p.surface_area
            if n > 0:
                d_tr, d_br = instance.delays(n - 1)
            for k in range(K):
                # level dynamics; l_k is the level at the end of period k and the
                # measured level precedes period 0
                coeffs = [(h.idx("l", n, w, k), 1.0), (h.idx("q_tr", n, w, k), step),
                          (h.idx("q_br", n, w, k), step)]
                rhs = step * scenarios.ext_inflow[w, n, k]
                if k > 0:
                    coeffs.append((h.idx("l", n, w, k - 1), -1.0))
                else:
                    rhs += state.levels[n]
                if n > 0:
                    for kind, d in (("q_tr", d_tr), ("q_br", d_br)):
                        src = k - d
                        if src >= 0:
                            coeffs.append((h.idx(kind, n - 1, w, src), -step))
                        else:
                            rhs += step * state.past(kind, n - 1, -src)
                rows.add(coeffs, rhs, rhs, ("level", n, w, k))
                # ramp, the first period anchored to the last implemented discharge
                if k > 0:
                    rows.add([(h.idx("q_tr", n, w, k), 1.0), (h.idx("q_tr", n, w, k - 1), -1.0)],
                             -p.ramp_limit, p.ramp_limit, ("ramp", n, w, k))
                else:
                    last = state.past("q_tr", n, 1)
                    rows.add([(h.idx("q_tr", n, w, 0), 1.0)], last - p.ramp_limit,
                             last + p.ramp_limit, ("ramp", n, w, 0))
                # head definition
                rows.add([(h.idx("h", n, w, k), 1.0), (h.idx("l", n, w, k), -1.0)],
                         -p.tailrace, -p.tailrace, ("head", n, w, k))
                emit_envelope(rows, p, C, h.idx("p_h", n, w, k), h.idx("q_tr", n, w, k),
                              h.idx("h", n, w, k), (n, w, k))
                # level tracking
                il = h.idx("l", n, w, k)
                ref = market.level_ref[n, k]
                quad[il] += 2.0 * market.alpha
                lin[il] += -2.0 * market.alpha * ref
                offset += market.alpha * ref * ref
        for k in range(K):
            coeffs = [(h.idx("p_h", n, w, k), dt_h) for n in range(N)]
            coeffs += [(h.idx("d_up", None, w, k), 1.0), (h.idx("d_dn", None, w, k), -1.0)]
            rhs = market.offer[k] - scenarios.vres_power[w, k] * dt_h
            rows.add(coeffs, rhs, rhs, ("balance", None, w, k))
            lin[h.idx("d_up", None, w, k)] += scenarios.price_up[w, k]
            lin[h.idx("d_dn", None, w, k)] -= scenarios.price_down[w, k]

    h.problem = assemble(reg, rows, quad_diag=quad, linear=lin, lb=lb, ub=ub, offset=offset)
    return h


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_PLANT_FIELDS = ("surface_area", "level_min", "level_max", "tailrace", "turbine_min",
                 "turbine_max", "barrage_min", "power_min", "power_max", "efficiency",
                 "ramp_limit", "delay_turbine", "delay_barrage")


def _number(obj: dict, key: str, where: str, default=None) -> float:
    if key not in obj:
        if default is not None:
            return float(default)
        raise InputError(f"{where}: missing field '{key}'")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise InputError(f"{where}: field '{key}' must be a number, got {val!r}")
    return float(val)


def instance_from_dict(data: dict) -> CascadeInstance:
    if not isinstance(data, dict):
        raise InputError("instance: top level must be a JSON object")
    plants_raw = data.get("plants")
    if not isinstance(plants_raw, list) or not plants_raw:
        raise InputError("instance: field 'plants' must be a non-empty list")
    plants = []
    for i, raw in enumerate(plants_raw):
        where = f"instance: plants[{i}]"
        if not isinstance(raw, dict):
            raise InputError(f"{where} must be an object")
        kwargs = {f: _number(raw, f, where, 0.0 if f in ("power_min", "delay_turbine", "delay_barrage") else None)
                  for f in _PLANT_FIELDS}
        plants.append(PlantParams(name=str(raw.get("name", f"plant{i}")), **kwargs))
    physics = data.get("physics", {})
    if not isinstance(physics, dict):
        raise InputError("instance: field 'physics' must be an object")
    return CascadeInstance(
        plants=tuple(plants),
        sampling=_number(data, "sampling", "instance"),
        water_density=_number(physics, "water_density", "instance: physics", 1000.0),
        gravity=_number(physics, "gravity", "instance: physics", 9.81),
    )


def instance_to_dict(instance: CascadeInstance) -> dict:
    return {
        "sampling": instance.sampling,
        "physics": {"water_density": instance.water_density, "gravity": instance.gravity},
        "plants": [{"name": p.name, **{f: getattr(p, f) for f in _PLANT_FIELDS}}
                   for p in instance.plants],
    }


def load_instance(path) -> CascadeInstance:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"instance file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"instance file {path}: invalid JSON ({exc})") from None
    return instance_from_dict(data)


def reference_instance() -> CascadeInstance:
    """The three-plant cascade shipped with the package."""
    return load_instance(Path(__file__).with_name("data") / "reference_instance.json")


def save_scenarios(scenarios: ScenarioSet, path) -> None:
    """Write a scenario set as JSON (``.json``) or long-format CSV (anything else)."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps({
            "ext_inflow": scenarios.ext_inflow.tolist(),
            "vres_power": scenarios.vres_power.tolist(),
            "price_up": scenarios.price_up.tolist(),
            "price_down": scenarios.price_down.tolist(),
        }))
        return
    W, N, K = scenarios.ext_inflow.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scenario", "k", "vres_power", "price_up", "price_down"]
                    + [f"ext_inflow_{n}" for n in range(N)])
        for w in range(W):
            for k in range(K):
                vals = [scenarios.vres_power[w, k], scenarios.price_up[w, k],
                        scenarios.price_down[w, k], *scenarios.ext_inflow[w, :, k]]
                wr.writerow([w, k] + [repr(float(v)) for v in vals])


def load_scenarios(path) -> ScenarioSet:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"scenario file not found: {path}")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        try:
            return ScenarioSet(**{k: data[k] for k in ("ext_inflow", "vres_power", "price_up", "price_down")})
        except KeyError as exc:
            raise InputError(f"scenario file {path}: missing field {exc}") from None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"scenario file {path}: no data rows")
    N = sum(1 for c in rows[0] if c.startswith("ext_inflow_"))
    W = 1 + max(int(r["scenario"]) for r in rows)
    K = 1 + max(int(r["k"]) for r in rows)
    inflow = np.full((W, N, K), np.nan)
    arrs = {c: np.full((W, K), np.nan) for c in ("vres_power", "price_up", "price_down")}
    for r in rows:
        w, k = int(r["scenario"]), int(r["k"])
        for c in arrs:
            arrs[c][w, k] = float(r[c])
        for n in range(N):
            inflow[w, n, k] = float(r[f"ext_inflow_{n}"])
    if np.isnan(inflow).any() or any(np.isnan(a).any() for a in arrs.values()):
        raise InputError(f"scenario file {path}: missing (scenario, k) rows")
    return ScenarioSet(inflow, **arrs)
