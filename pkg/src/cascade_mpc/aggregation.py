"""
Tail aggregation of the prediction horizon and the aggregated MPC builder.

The horizon keeps full resolution for its first ``R - 1`` periods and
lumps the remaining ``K - R + 1`` periods into one representative period.

Two formulations of a multi-period representative period are available:

``"certified"`` (default)
    Tail variables are member *averages* (mean discharge, mean power, mean
    level and head) plus the end-of-cluster level. Every constraint is one
    that the averages of any feasible full-resolution trajectory satisfy,
    and the tail cost is a pointwise lower bound on the full-resolution
    cost, so the aggregated optimum never exceeds the full-scale optimum.
``"literal"``
    Literal ``k -> r`` substitution: constant decisions within the cluster,
    end-of-cluster level and head, summed prices on a single imbalance
    pair and one tracking term per cluster. Cheaper and simpler,
    but not a lower bound in general (time-varying prices
    inside the tail already break it).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    PLANT_SYMBOLS, SYSTEM_SYMBOLS, CascadeInstance, InputError, MarketAndObjective,
    ModelHandle, RollingState, ScenarioSet, VarKey, _register_controls, emit_envelope,
    validate_inputs,
)
from .qp import INF, RowBuilder, VariableRegistry, assemble

TAIL_MODELS = ("certified", "literal")
MAX_PIECES = 9


@dataclass(frozen=True)
class ClusterMap:
    """Contiguous, ordered partition of ``range(K)`` into representative periods."""

    starts: tuple[int, ...]
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(int(s) for s in self.starts))
        s = self.starts
        if not s or s[0] != 0:
            raise InputError("cluster map must start at period 0")
        if any(b <= a for a, b in zip(s, s[1:])) or s[-1] >= self.horizon:
            raise InputError("cluster starts must be strictly increasing and inside the horizon")

    @property
    def num_clusters(self) -> int:
        return len(self.starts)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        """Half-open ``[start, end)`` range of every representative period."""
        ends = self.starts[1:] + (self.horizon,)
        return list(zip(self.starts, ends))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([e - s for s, e in self.bounds])

    def members(self, r: int) -> range:
        return range(*self.bounds[r])

    def cluster_of(self) -> np.ndarray:
        """Representative period of every full-resolution period."""
        return np.repeat(np.arange(self.num_clusters), self.sizes)

    def to_json(self) -> str:
        return json.dumps([list(b) for b in self.bounds])

    @classmethod
    def from_json(cls, text: str) -> "ClusterMap":
        ranges = json.loads(text)
        for (a, b), (c, _) in zip(ranges, ranges[1:]):
            if b != c:
                raise InputError("cluster ranges must be contiguous")
        return cls(tuple(a for a, _ in ranges), ranges[-1][1])


def build_tail_map(K: int, R: int) -> ClusterMap:
    """Singletons for periods ``0..R-2`` and one tail of ``K - R + 1`` periods."""
    if not 1 <= R <= K:
        raise InputError(f"need 1 <= R <= K, got R={R}, K={K}")
    return ClusterMap(tuple(range(R)), K)


def aggregate_series(series: Sequence[float], cmap: ClusterMap) -> np.ndarray:
    """Mean of ``series`` over each representative period (last axis)."""
    arr = np.asarray(series, dtype=float)
    if arr.shape[-1] != cmap.horizon:
        raise InputError(f"series length {arr.shape[-1]} does not match horizon {cmap.horizon}")
    sums = np.add.reduceat(arr, list(cmap.starts), axis=-1)
    return sums / cmap.sizes


class AggregatedModelHandle(ModelHandle):
    def __init__(self, problem, registry, num_plants, num_scenarios, cluster_map: ClusterMap,
                 tail_model: str):
        super().__init__(problem, registry, num_plants, num_scenarios, cluster_map.num_clusters)
        self.cluster_map = cluster_map
        self.tail_model = tail_model


def inflow_terms(cmap: ClusterMap, r: int, delay: int):
    """Upstream contributions to the reservoir balance of cluster ``r``.

    Returns ``(counts, lags)``: how many member periods read each upstream
    representative period, and the pre-horizon lags (>= 1) read from the
    discharge history.
    """
    where = cmap.cluster_of()
    counts: Counter = Counter()
    lags = []
    for k in cmap.members(r):
        src = k - delay
        if src >= 0:
            counts[int(where[src])] += 1
        else:
            lags.append(-src)
    return counts, lags


# ---------------------------------------------------------------------------
# piecewise-linear bounds used by the certified tail
# ---------------------------------------------------------------------------

def _subset(n: int, limit: int = MAX_PIECES) -> list[int]:
    if n <= limit:
        return list(range(n))
    return sorted(set(np.linspace(0, n - 1, limit).round().astype(int).tolist()))


def weighted_sum_bounds(weights, lo, hi, limit: int = MAX_PIECES):
    """Affine bounds on ``sum(w_i x_i)`` given ``sum(x_i) = T`` and ``lo_i <= x_i <= hi_i``.

    Returns ``(upper, lower)``, lists of ``(slope, intercept)`` pairs in
    ``T``: ``sum(w x) <= slope*T + intercept`` for every upper piece and
    ``>= slope*T + intercept`` for every lower piece. The extremes are
    reached by filling the largest (smallest) weights first, which makes
    the upper envelope concave and the lower one convex. Each piece is a
    valid bound on its own, so keeping only ``limit`` of them loosens but
    never invalidates the result.
    """
    w = np.asarray(weights, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), w.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), w.shape)
    out = []
    for order in (np.argsort(-w, kind="stable"), np.argsort(w, kind="stable")):
        filled, value = float(lo.sum()), float(w @ lo)
        pieces = []
        for i in order:
            pieces.append((w[i], value - w[i] * filled))
            cap = hi[i] - lo[i]
            if not np.isfinite(cap):
                break
            filled += cap
            value += w[i] * cap
        out.append([pieces[j] for j in _subset(len(pieces), limit)])
    return out[0], out[1]


def imbalance_cost_pieces(net_demand, price_up, price_down, y_min, y_max, dt_h):
    """Convex piecewise-linear lower bound on a cluster's imbalance cost.

    ``G(Y)`` is the least total settlement cost over the member periods
    when the mean hydro output is ``Y`` and each member's output may lie
    anywhere in ``[y_min, y_max]``. Returned as ``(slope, intercept)``
    pieces in ``Y`` with ``G(Y) = max(pieces)``.
    """
    b = np.asarray(net_demand, float)
    pu = np.asarray(price_up, float)
    pd = np.asarray(price_down, float)
    L = b.size

    def member_cost(y):
        gap = b - y * dt_h
        return np.where(gap >= 0, pu * gap, pd * gap)

    knee = np.clip(b / dt_h, y_min, y_max)
    segs = [(-pu[j] * dt_h, knee[j] - y_min) for j in range(L)]
    segs += [(-pd[j] * dt_h, y_max - knee[j]) for j in range(L)]
    segs = sorted((s for s in segs if s[1] > 0), key=lambda s: s[0])

    total, cost = L * y_min, float(member_cost(y_min).sum())
    pieces = []
    for slope, length in segs:
        # piece through (total, cost) with slope per unit of summed output
        pieces.append((slope * L, cost - slope * total))
        total += length
        cost += slope * length
    if not pieces:
        pieces.append((0.0, cost))
    return pieces


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

def build_aggregated_model(instance: CascadeInstance, scenarios: ScenarioSet,
                           market: MarketAndObjective, state: RollingState,
                           cmap: ClusterMap, tail_model: str = "certified") -> AggregatedModelHandle:
    """Temporally aggregated stochastic MPC problem over ``cmap``'s periods.

    Parameters
    ----------
    cmap : ClusterMap
        Partition of the horizon. The certified formulation needs period 0
        and every non-final representative period to be singletons (the
        shape produced by :func:`build_tail_map` with ``R >= 2``).
    tail_model : {"certified", "literal"}
        Formulation of multi-period representative periods, see module
        docstring.
    """
    if tail_model not in TAIL_MODELS:
        raise InputError(f"unknown tail_model {tail_model!r}")
    K = cmap.horizon
    validate_inputs(instance, scenarios, market, state, K)
    N, W, R = instance.num_plants, scenarios.num_scenarios, cmap.num_clusters
    sizes = cmap.sizes
    certified = tail_model == "certified"
    if certified and (sizes[:-1] > 1).any():
        raise InputError("certified aggregation supports multi-period clusters only at the tail")
    if certified and sizes[0] > 1:
        raise InputError("certified aggregation needs R >= 2 (period 0 must be its own cluster)")
    wide = [r for r in range(R) if sizes[r] > 1]
    relaxed = set(wide) if certified else set()

    b = _Builder(instance, scenarios, market, state, cmap, relaxed)
    b.register()
    b.emit_plants()
    b.emit_balance()
    h = AggregatedModelHandle(None, b.reg, N, W, cmap, tail_model)
    h.problem = assemble(b.reg, b.rows, quad_diag=b.quad, linear=b.lin, lb=b.lb, ub=b.ub,
                         offset=b.offset)
    return h


class _Builder:
    """Row emission for the aggregated model; one instance per build."""

    def __init__(self, instance, scenarios, market, state, cmap, relaxed):
        self.inst, self.sc, self.mk, self.st, self.cmap = instance, scenarios, market, state, cmap
        self.relaxed = relaxed
        self.K = cmap.horizon
        self.R = cmap.num_clusters
        self.sizes = cmap.sizes
        self.reg = VariableRegistry()
        self.rows = RowBuilder()
        self.lb: list[float] = []
        self.ub: list[float] = []

    # -- variables ---------------------------------------------------------
    def _add(self, key, lo, hi):
        self.reg.register(key)
        self.lb.append(lo)
        self.ub.append(hi)

    def register(self):
        inst = self.inst
        _register_controls(self.reg, inst, self.lb, self.ub, None)
        for w in range(self.sc.num_scenarios):
            for r in range(self.R):
                for n, p in enumerate(inst.plants):
                    for s in PLANT_SYMBOLS:
                        if s in ("q_tr", "q_br") and r == 0:
                            continue
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
                        self._add(VarKey(s, n, w, r), lo, hi)
                    if r in self.relaxed:
                        self._add(VarKey("l_end", n, w, r), p.level_min, p.level_max)
                        for s in ("w_tr", "w_br"):
                            self._add(VarKey(s, n, w, r), -INF, INF)
                        if n > 0:
                            up = inst.plants[n - 1]
                            size = self.sizes[r]
                            for kind, d, lo, hi in zip(("tr", "br"), inst.delays(n - 1),
                                                       (up.turbine_min, up.barrage_min),
                                                       (up.turbine_max, INF)):
                                if d < size:
                                    for m in range(size - d, size):
                                        self._add(VarKey(f"lost_{kind}.{m}", n, w, r), lo, hi)
                if r in self.relaxed:
                    self._add(VarKey("imb", None, w, r), -INF, INF)
                else:
                    for s in SYSTEM_SYMBOLS:
                        self._add(VarKey(s, None, w, r), 0.0, INF)
        n_var = len(self.reg)
        self.quad = np.zeros(n_var)
        self.lin = np.zeros(n_var)
        self.offset = 0.0

    def idx(self, kind, n=None, w=None, r=None):
        if kind in ("q_tr", "q_br") and r == 0:
            return self.reg[VarKey("u_" + kind[2:], n, None, None)]
        return self.reg[VarKey(kind, n, w, r)]

    # -- hydro rows --------------------------------------------------------
    def emit_plants(self):
        inst, sc, mk, cmap = self.inst, self.sc, self.mk, self.cmap
        starts = list(cmap.starts)
        ref = np.add.reduceat(mk.level_ref[:, :self.K], starts, axis=-1) / self.sizes
        inflow_sum = np.add.reduceat(sc.ext_inflow[:, :, :self.K], starts, axis=-1)
        up = {}
        for n in range(1, inst.num_plants):
            d_tr, d_br = inst.delays(n - 1)
            up[n] = {r: (("q_tr", d_tr, inflow_terms(cmap, r, d_tr)),
                         ("q_br", d_br, inflow_terms(cmap, r, d_br))) for r in range(self.R)}
        for w in range(sc.num_scenarios):
            for n, p in enumerate(inst.plants):
                C = inst.power_coefficient(n)
                step = inst.sampling / p.surface_area
                for r in range(self.R):
                    if r in self.relaxed:
                        self._relaxed_levels(w, n, p, r, step)
                    else:
                        self._level_row(w, n, p, r, step, inflow_sum[w, n, r], up.get(n, {}).get(r, ()))
                    self._ramp_row(w, n, p, r)
                    self.rows.add([(self.idx("h", n, w, r), 1.0), (self.idx("l", n, w, r), -1.0)],
                                  -p.tailrace, -p.tailrace, ("head", n, w, r))
                    emit_envelope(self.rows, p, C, self.idx("p_h", n, w, r),
                                  self.idx("q_tr", n, w, r), self.idx("h", n, w, r), (n, w, r))
                    il = self.idx("l", n, w, r)
                    weight = mk.alpha * (self.sizes[r] if r in self.relaxed else 1.0)
                    self.quad[il] += 2.0 * weight
                    self.lin[il] += -2.0 * weight * ref[n, r]
                    self.offset += weight * ref[n, r] ** 2

    def _level_row(self, w, n, p, r, step, inflow, upstream):
        m = self.sizes[r] * step
        coeffs = [(self.idx("l", n, w, r), 1.0), (self.idx("q_tr", n, w, r), m),
                  (self.idx("q_br", n, w, r), m)]
        rhs = step * inflow
        if r > 0:
            coeffs.append((self.idx("l", n, w, r - 1), -1.0))
        else:
            rhs += self.st.levels[n]
        for kind, _, (counts, lags) in upstream:
            for src, cnt in counts.items():
                coeffs.append((self.idx(kind, n - 1, w, src), -step * cnt))
            rhs += step * sum(self.st.past(kind, n - 1, lag) for lag in lags)
        self.rows.add(coeffs, rhs, rhs, ("level", n, w, r))

    def _ramp_row(self, w, n, p, r):
        if r == 0:
            last = self.st.past("q_tr", n, 1)
            self.rows.add([(self.idx("q_tr", n, w, 0), 1.0)], last - p.ramp_limit,
                          last + p.ramp_limit, ("ramp", n, w, 0))
            return
        limit = p.ramp_limit
        if self.relaxed & {r, r - 1}:
            # distance between the member-mean positions of both clusters
            (s0, e0), (s1, e1) = self.cmap.bounds[r - 1], self.cmap.bounds[r]
            limit *= 0.5 * (s1 + e1 - s0 - e0)
        self.rows.add([(self.idx("q_tr", n, w, r), 1.0), (self.idx("q_tr", n, w, r - 1), -1.0)],
                      -limit, limit, ("ramp", n, w, r))

    def _relaxed_levels(self, w, n, p, r, step):
        """End and mean level of a multi-period tail cluster ``[s, e)``.

        Member discharges are not modelled one by one. What enters the rows
        is their sum (``L`` times the mean variable) and their sum weighted
        by the share of the cluster's levels each period's flow reaches
        (``w_*``). Piecewise-linear rows keep every weighted sum within what
        some member profile with the given mean can produce.
        """
        s, e = self.cmap.bounds[r]
        L = e - s
        weight = (e - np.arange(s, e)) / L
        ext = self.sc.ext_inflow[w, n, s:e]
        tag = (n, w, r)
        prev = self.idx("l", n, w, r - 1)
        iq = {k: self.idx("q_" + k, n, w, r) for k in ("tr", "br")}
        iw = {k: self.idx("w_" + k, n, w, r) for k in ("tr", "br")}
        end_c = [(self.idx("l_end", n, w, r), 1.0), (prev, -1.0),
                 (iq["tr"], step * L), (iq["br"], step * L)]
        mean_c = [(self.idx("l", n, w, r), 1.0), (prev, -1.0), (iw["tr"], step), (iw["br"], step)]
        end_rhs = step * ext.sum()
        mean_rhs = step * (weight * ext).sum()

        for k, lo, hi in (("tr", p.turbine_min, p.turbine_max), ("br", p.barrage_min, INF)):
            self._profile_rows([(iw[k], 1.0)], [(iq[k], L)], weight, lo, hi, tag)
        # turbine members also stay within m+1 ramp steps of the period before the cluster
        iprev = self.idx("q_tr", n, w, r - 1)
        reach = p.ramp_limit * np.arange(1, L + 1)
        self._profile_rows([(iw["tr"], 1.0), (iprev, -weight.sum())], [(iq["tr"], L), (iprev, -L)],
                           weight, -reach, reach, tag)

        if n > 0:
            up = self.inst.plants[n - 1]
            for k, d, lo, hi in zip(("tr", "br"), self.inst.delays(n - 1),
                                    (up.turbine_min, up.barrage_min), (up.turbine_max, INF)):
                for j, kk in enumerate(range(s, e)):
                    src = kk - d
                    if src >= s:
                        continue
                    if src >= 0:
                        iv = self.idx("q_" + k, n - 1, w, src)
                        end_c.append((iv, -step))
                        mean_c.append((iv, -step * weight[j]))
                    else:
                        val = self.st.past("q_" + k, n - 1, -src)
                        end_rhs += step * val
                        mean_rhs += step * weight[j] * val
                kept = L - d    # upstream members whose water arrives before the horizon ends
                if kept <= 0:
                    continue
                iu = self.idx("q_" + k, n - 1, w, r)
                iwu = self.idx("w_" + k, n - 1, w, r)
                lost = [(m, self.idx(f"lost_{k}.{m}", n, w, r)) for m in range(kept, L)]
                # sum of kept members: L*mean - lost
                end_c.append((iu, -step * L))
                end_c += [(i, step) for _, i in lost]
                # weighted sum of kept members, shifted by the delay
                mean_c += [(iwu, -step), (iu, step * d)]
                mean_c += [(i, step * (weight[m] - d / L)) for m, i in lost]
                # the kept members must realise the upstream profile
                self._profile_rows([(iwu, 1.0)] + [(i, -weight[m]) for m, i in lost],
                                   [(iu, L)] + [(i, -1.0) for _, i in lost],
                                   weight[:kept], lo, hi, tag)

        self.rows.add(end_c, end_rhs, end_rhs, ("level_end", *tag))
        self.rows.add(mean_c, mean_rhs, mean_rhs, ("level", *tag))

    def _profile_rows(self, wsum, total, weights, lo, hi, tag):
        """Rows keeping ``wsum`` within the weighted-sum range for ``total``.

        ``wsum`` and ``total`` are linear expressions ``[(index, coef)]``.
        """
        upper, lower = weighted_sum_bounds(weights, lo, hi)
        for pieces, sense in ((upper, "ub"), (lower, "lb")):
            for slope, icpt in pieces:
                coeffs = wsum + [(i, -slope * c) for i, c in total]
                if sense == "ub":
                    self.rows.add(coeffs, -INF, icpt, ("profile", *tag))
                else:
                    self.rows.add(coeffs, icpt, INF, ("profile", *tag))

    # -- balance rows ------------------------------------------------------
    def emit_balance(self):
        inst, sc, mk, cmap = self.inst, self.sc, self.mk, self.cmap
        N, dt_h = inst.num_plants, inst.hours
        starts = list(cmap.starts)

        def csum(a):
            return np.add.reduceat(np.asarray(a)[..., :self.K], starts, axis=-1)

        offer = csum(mk.offer) / self.sizes
        vres = csum(sc.vres_power) / self.sizes
        price_up = csum(sc.price_up)
        price_dn = csum(sc.price_down)
        y_min = sum(max(p.power_min, inst.power_coefficient(n) * p.turbine_min * p.head_min)
                    for n, p in enumerate(inst.plants))
        y_max = sum(min(p.power_max, inst.power_coefficient(n) * p.turbine_max * p.head_max)
                    for n, p in enumerate(inst.plants))
        for w in range(sc.num_scenarios):
            for r in range(self.R):
                powers = [self.idx("p_h", n, w, r) for n in range(N)]
                if r in self.relaxed:
                    s, e = cmap.bounds[r]
                    net = mk.offer[s:e] - sc.vres_power[w, s:e] * dt_h
                    it = self.idx("imb", None, w, r)
                    for slope, icpt in imbalance_cost_pieces(net, sc.price_up[w, s:e],
                                                             sc.price_down[w, s:e], y_min, y_max, dt_h):
                        self.rows.add([(it, 1.0)] + [(i, -slope) for i in powers], icpt, INF,
                                      ("imbalance_cost", None, w, r))
                    self.lin[it] += 1.0
                    continue
                coeffs = [(i, dt_h) for i in powers]
                coeffs += [(self.idx("d_up", None, w, r), 1.0), (self.idx("d_dn", None, w, r), -1.0)]
                rhs = offer[r] - vres[w, r] * dt_h
                self.rows.add(coeffs, rhs, rhs, ("balance", None, w, r))
                self.lin[self.idx("d_up", None, w, r)] += price_up[w, r]
                self.lin[self.idx("d_dn", None, w, r)] -= price_dn[w, r]
