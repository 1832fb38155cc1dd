import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_mpc.aggregation import (ClusterMap, aggregate_series, build_aggregated_model,
                                     build_tail_map, imbalance_cost_pieces, weighted_sum_bounds)
from cascade_mpc.model import InputError, build_full_model
from cascade_mpc.qp import solve

from cases import random_case


def _bounds(cmap):
    return [list(cmap.members(r)) for r in range(cmap.num_clusters)]


def test_tail_map_small():
    assert _bounds(build_tail_map(12, 4)) == [[0], [1], [2], list(range(3, 12))]


def test_tail_map_long_horizon():
    cmap = build_tail_map(720, 450)
    assert cmap.num_clusters == 450
    assert (cmap.sizes[:449] == 1).all() and cmap.sizes[-1] == 271


def test_tail_map_identity_and_errors():
    assert (build_tail_map(7, 7).sizes == 1).all()
    for R in (0, 8):
        with pytest.raises(InputError):
            build_tail_map(7, R)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.data())
def test_tail_map_partitions(K, data):
    R = data.draw(st.integers(1, K))
    cmap = build_tail_map(K, R)
    assert cmap.sizes.sum() == K and cmap.num_clusters == R
    assert list(cmap.cluster_of()) == sorted(cmap.cluster_of())
    assert ClusterMap.from_json(cmap.to_json()) == cmap


def test_aggregate_series():
    cmap = ClusterMap((0, 1, 2), 4)
    np.testing.assert_allclose(aggregate_series([1, 2, 3, 4], cmap), [1, 2, 3.5])
    np.testing.assert_allclose(aggregate_series(np.full(9, 165.0), build_tail_map(9, 3)), 165.0)
    x = np.arange(6.0)
    np.testing.assert_array_equal(aggregate_series(x, build_tail_map(6, 6)), x)
    with pytest.raises(InputError):
        aggregate_series([1, 2], cmap)


def test_noncontiguous_json_rejected():
    with pytest.raises(InputError):
        ClusterMap.from_json("[[0, 2], [3, 5]]")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(0, 1), st.integers(0, 99))
def test_weighted_sum_bounds_hold(weights, frac, seed):
    rng = np.random.default_rng(seed)
    w = np.array(weights)
    lo = rng.uniform(0, 1, w.size)
    hi = lo + rng.uniform(0, 2, w.size)
    x = lo + frac * (hi - lo) * rng.uniform(0, 1, w.size)
    T = x.sum()
    upper, lower = weighted_sum_bounds(w, lo, hi)
    assert all(w @ x <= s * T + c + 1e-9 for s, c in upper)
    assert all(w @ x >= s * T + c - 1e-9 for s, c in lower)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_imbalance_pieces_underestimate(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 8))
    b = rng.uniform(-50, 300, L)
    down = rng.uniform(0, 50, L)
    up = down + rng.uniform(0, 50, L)
    y = rng.uniform(10, 150, L)
    gap = b - y * 2.0
    cost = np.where(gap >= 0, up * gap, down * gap).sum()
    pieces = imbalance_cost_pieces(b, up, down, 10.0, 150.0, 2.0)
    assert max(s * y.mean() + c for s, c in pieces) <= cost + 1e-7


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_identity_aggregation(seed):
    inst, scen, market, state = random_case(seed)
    K = scen.horizon
    full = solve(build_full_model(inst, scen, market, state).problem, tol=1e-10)
    agg = solve(build_aggregated_model(inst, scen, market, state, build_tail_map(K, K)).problem,
                tol=1e-10)
    assert agg.objective == pytest.approx(full.objective, rel=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_lower_bound_property(seed, data):
    inst, scen, market, state = random_case(seed)
    K = scen.horizon
    R = data.draw(st.integers(2, K - 1))
    full = solve(build_full_model(inst, scen, market, state).problem, tol=1e-10)
    agg = build_aggregated_model(inst, scen, market, state, build_tail_map(K, R))
    lb = solve(agg.problem, tol=1e-10)
    assert lb.ok
    assert lb.objective <= full.objective + 1e-7, f"seed={seed} R={R}"


def test_lower_bound_small_instance():
    inst, scen, market, state = random_case(11, N=2, K=12, W=2)
    full = solve(build_full_model(inst, scen, market, state).problem, tol=1e-10)
    agg = solve(build_aggregated_model(inst, scen, market, state, build_tail_map(12, 4)).problem,
                tol=1e-10)
    assert agg.objective <= full.objective + 1e-7


def test_refinement_tightens_on_average():
    inst, scen, market, state = random_case(3, N=3, K=16, W=2)
    vals = [solve(build_aggregated_model(inst, scen, market, state,
                                         build_tail_map(16, R)).problem, tol=1e-10).objective
            for R in range(2, 17)]
    drops = sum(b < a - 1e-6 * abs(a) for a, b in zip(vals, vals[1:]))
    assert drops <= 2 and vals[-1] >= vals[0]


def test_single_cluster_literal_form():
    inst, scen, market, state = random_case(2, N=1, K=6, W=1)
    agg = build_aggregated_model(inst, scen, market, state, build_tail_map(6, 1), "literal")
    assert agg.num_periods == 1
    assert solve(agg.problem).ok


def test_certified_needs_two_clusters():
    inst, scen, market, state = random_case(2, N=1, K=6, W=1)
    with pytest.raises(InputError):
        build_aggregated_model(inst, scen, market, state, build_tail_map(6, 1))


def test_first_stage_shared():
    inst, scen, market, state = random_case(8, N=2, K=10, W=3)
    agg = build_aggregated_model(inst, scen, market, state, build_tail_map(10, 4))
    x = solve(agg.problem).primal
    for n in range(2):
        assert len({agg.idx("q_tr", n, w, 0) for w in range(3)}) == 1
        assert agg.control(x).q_tr.shape == (2,)
