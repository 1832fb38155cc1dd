"""
Synthetic uncertainty: inflows, renewable power and imbalance prices.

Every process is a daily sinusoid plus an AR(1) deviation, clipped to a
physical range. One realization path drives the plant; at each control
step the forecaster draws scenarios conditioned on the deviation observed
so far. Scenario 0 is the central forecast: its first period equals the
realization and its deviation decays geometrically afterwards.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import CascadeInstance, InputError, ScenarioSet


@dataclass(frozen=True)
class ProcessSpec:
    """``x_t = mean + amplitude * sin(2 pi (hour_t - phase) / period) + e_t``.

    ``e_t = ar * e_{t-1} + noise * N(0, 1)``; the sum is clipped to
    ``[lower, upper]``. ``phase`` and ``period`` are in hours.
    """

    mean: float
    amplitude: float = 0.0
    phase: float = 0.0
    period: float = 24.0
    ar: float = 0.9
    noise: float = 0.0
    lower: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        if not 0.0 <= self.ar < 1.0:
            raise InputError("generator: 'ar' must lie in [0, 1)")
        if self.noise < 0:
            raise InputError("generator: 'noise' must be nonnegative")
        if self.period <= 0:
            raise InputError("generator: 'period' must be positive")
        if self.lower > self.upper:
            raise InputError("generator: 'lower' exceeds 'upper'")

    def profile(self, periods: np.ndarray, sampling: float) -> np.ndarray:
        hours = periods * sampling / 3600.0
        return self.mean + self.amplitude * np.sin(2 * np.pi * (hours - self.phase) / self.period)


@dataclass(frozen=True)
class GeneratorSpec:
    """One process per plant inflow (m3/s), renewable power (MW) and price (EUR/MWh)."""

    inflow: tuple
    vres: ProcessSpec
    price_up: ProcessSpec
    price_down: ProcessSpec

    def __post_init__(self):
        object.__setattr__(self, "inflow", tuple(self.inflow))
        if not self.inflow:
            raise InputError("generator: need one inflow process per plant")
        if self.price_down.lower < 0:
            raise InputError("generator: prices must be clipped at or above zero")
        if any(p.lower < 0 for p in self.inflow):
            raise InputError("generator: inflows must be clipped at or above zero")
        if self.vres.lower < 0:
            raise InputError("generator: renewable power must be clipped at or above zero")

    @property
    def processes(self) -> list[ProcessSpec]:
        return list(self.inflow) + [self.vres, self.price_up, self.price_down]

    @classmethod
    def desk(cls, instance: CascadeInstance, vres_capacity: float = 120.0) -> "GeneratorSpec":
        """Defaults shaped like a river cascade with one large head plant."""
        means = [700.0] + [80.0] * (instance.num_plants - 1)
        inflow = tuple(ProcessSpec(m, 0.05 * m, 6.0, ar=0.98, noise=0.01 * m) for m in means)
        return cls(
            inflow=inflow,
            vres=ProcessSpec(60.0, 40.0, 8.0, ar=0.95, noise=4.0, upper=vres_capacity),
            price_up=ProcessSpec(75.0, 25.0, 12.0, ar=0.95, noise=3.0),
            price_down=ProcessSpec(40.0, 20.0, 12.0, ar=0.95, noise=2.0),
        )

    def to_dict(self) -> dict:
        def clean(p):
            d = asdict(p)
            d["upper"] = None if np.isinf(d["upper"]) else d["upper"]
            return d
        return {"inflow": [clean(p) for p in self.inflow], "vres": clean(self.vres),
                "price_up": clean(self.price_up), "price_down": clean(self.price_down)}

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        def proc(d, where):
            if not isinstance(d, dict) or "mean" not in d:
                raise InputError(f"generator: '{where}' needs at least a 'mean'")
            d = dict(d)
            if d.get("upper") is None:
                d["upper"] = np.inf
            unknown = set(d) - set(ProcessSpec.__dataclass_fields__)
            if unknown:
                raise InputError(f"generator: unknown field(s) {sorted(unknown)} in '{where}'")
            return ProcessSpec(**{k: float(v) for k, v in d.items()})

        try:
            return cls(inflow=tuple(proc(d, f"inflow[{i}]") for i, d in enumerate(data["inflow"])),
                       vres=proc(data["vres"], "vres"), price_up=proc(data["price_up"], "price_up"),
                       price_down=proc(data["price_down"], "price_down"))
        except KeyError as exc:
            raise InputError(f"generator: missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Realization:
    """The path the plant actually experiences, indexed by absolute period."""

    ext_inflow: np.ndarray     # [plant, period]
    vres_power: np.ndarray     # [period]
    price_up: np.ndarray
    price_down: np.ndarray
    deviation: np.ndarray = field(repr=False)   # [process, period], unclipped AR state

    @property
    def length(self) -> int:
        return self.vres_power.shape[0]


def _assemble(spec: GeneratorSpec, values: np.ndarray):
    """Split a ``[..., process, period]`` array and enforce the price order."""
    N = len(spec.inflow)
    inflow = values[..., :N, :]
    vres = values[..., N, :]
    up, down = values[..., N + 1, :], values[..., N + 2, :]
    return inflow, vres, np.maximum(up, down), down


def _clip(spec: GeneratorSpec, raw: np.ndarray) -> np.ndarray:
    lo = np.array([p.lower for p in spec.processes])[:, None]
    hi = np.array([p.upper for p in spec.processes])[:, None]
    return np.clip(raw, lo, hi)


def realize(spec: GeneratorSpec, length: int, sampling: float, seed: int) -> Realization:
    """Draw the realization path for periods ``0 .. length - 1``."""
    if length < 1:
        raise InputError("realize: length must be at least 1")
    rng = np.random.default_rng([seed, 0])
    procs = spec.processes
    ar = np.array([p.ar for p in procs])
    noise = np.array([p.noise for p in procs])
    dev = np.zeros((len(procs), length))
    shocks = rng.standard_normal((length, len(procs)))
    e = np.zeros(len(procs))
    for t in range(length):
        e = ar * e + noise * shocks[t]
        dev[:, t] = e
    t = np.arange(length)
    mean = np.array([p.profile(t, sampling) for p in procs])
    inflow, vres, up, down = _assemble(spec, _clip(spec, mean + dev))
    return Realization(inflow, vres, up, down, dev)


def generate_scenarios(spec: GeneratorSpec, realization: Realization, start: int, horizon: int,
                       count: int, sampling: float, seed: int) -> ScenarioSet:
    """Forecast scenarios for periods ``start .. start + horizon - 1``.

    Scenario 0 takes the realized deviation at ``start`` and lets it decay
    by the AR coefficient. The others continue the AR process from the
    deviation observed at ``start - 1`` with fresh noise. Deterministic in
    ``(seed, start)``.
    """
    if horizon < 1 or count < 1:
        raise InputError("generate_scenarios: horizon and count must be at least 1")
    if not 0 <= start < realization.length:
        raise InputError("generate_scenarios: start outside the realization path")
    procs = spec.processes
    P = len(procs)
    ar = np.array([p.ar for p in procs])
    noise = np.array([p.noise for p in procs])
    rng = np.random.default_rng([seed, 1, start])
    shocks = rng.standard_normal((count, horizon, P))

    dev = np.empty((count, P, horizon))
    dev[0, :, 0] = realization.deviation[:, start]
    for k in range(1, horizon):
        dev[0, :, k] = ar * dev[0, :, k - 1]
    prev = realization.deviation[:, start - 1] if start > 0 else np.zeros(P)
    for w in range(1, count):
        e = prev
        for k in range(horizon):
            e = ar * e + noise * shocks[w, k]
            dev[w, :, k] = e

    t = np.arange(start, start + horizon)
    mean = np.array([p.profile(t, sampling) for p in procs])
    values = np.stack([_clip(spec, mean + dev[w]) for w in range(count)])
    inflow, vres, up, down = _assemble(spec, values)
    return ScenarioSet(inflow, vres, up, down)
