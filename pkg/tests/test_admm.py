from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_mpc.admm import (AdmmConfig, ConsensusState, admm_objective, dual_update,
                              global_update, primal_residual, run_admm, split_consensus,
                              write_trace)
from cascade_mpc.aggregation import build_aggregated_model, build_tail_map
from cascade_mpc.model import VarKey
from cascade_mpc.qp import QpStatus, solve

from cases import desk_case, random_case


def _agg(seed, N=None, K=None, W=None, R=None):
    inst, scen, market, state = random_case(seed, N=N, K=K, W=W)
    K = scen.horizon
    R = R or max(2, K // 3)
    return build_aggregated_model(inst, scen, market, state, build_tail_map(K, R))


def _source(agg, key):
    if key.kind in ("q_tr", "q_br") and key.k == 0:
        key = VarKey("u_" + key.kind[2:], key.n, None, None)
    return agg.registry[key]


def test_subproblem_count():
    subs, layout = split_consensus(_agg(0, N=3, K=8, W=2))
    assert len(subs) == 7 and len(subs.hydro) == 6


def test_copy_counts_single_plant():
    subs, layout = split_consensus(_agg(0, N=1, K=6, W=1, R=3))
    assert len(subs) == 2
    for r in range(3):
        assert layout.copy_count[layout.index[VarKey("q_tr", 0, 0, r)]] == 2


def test_copy_counts_cascade():
    subs, layout = split_consensus(_agg(1, N=3, K=8, W=1, R=4))
    cc = lambda *k: layout.copy_count[layout.index[VarKey(*k)]]
    for r in range(4):
        assert cc("q_tr", 0, 0, r) == 3 and cc("q_tr", 1, 0, r) == 3
        assert cc("q_tr", 2, 0, r) == 2 and cc("p_h", 1, 0, r) == 2
    assert 2 <= layout.copy_count.min() and layout.copy_count.max() <= 3


def test_stack_masks_partition():
    subs, layout = split_consensus(_agg(2, N=3, K=8, W=2, R=3))
    for n in range(3):
        for w in range(2):
            idx, a, b = layout.stack(n, w)
            assert (a ^ b).all()
            assert len(idx) == (8 if n > 0 else 6) * 3
            lam = np.random.default_rng(n).normal(size=len(idx))
            z = np.random.default_rng(w + 7).normal(size=len(idx))
            assert (lam * a) @ z + (lam * b) @ z == pytest.approx(lam @ z)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_rows_partition(seed):
    agg = _agg(seed)
    subs, _ = split_consensus(agg)
    tags = Counter(t for s in subs.all() for t in s.problem.row_tags)
    assert tags == Counter(agg.problem.row_tags)
    assert sum(s.problem.num_rows for s in subs.all()) == agg.problem.num_rows


def _three_copy_state():
    subs, layout = split_consensus(_agg(3, N=2, K=6, W=1, R=3))
    state = ConsensusState.zeros(subs, layout)
    g = layout.index[VarKey("q_tr", 0, 0, 1)]
    vals = iter([2.0, 3.0, 4.0])
    for s, x in zip(subs.all(), state.x):
        for li, gi in zip(s.copies, s.globals_):
            if gi == g:
                x[li] = next(vals)
    return subs, layout, state, g


def test_global_update_averages_live_copies():
    subs, layout, state, g = _three_copy_state()
    global_update(state, subs, layout)
    assert state.z[g] == pytest.approx(3.0)
    p = layout.index[VarKey("p_h", 1, 0, 2)]
    for s, x in zip(subs.all(), state.x):
        x[s.copies[s.globals_ == p]] = 10.0 if s is subs.balance else 12.0
    global_update(state, subs, layout)
    assert state.z[p] == pytest.approx(11.0)


def test_dual_update_steps():
    subs, layout, state, g = _three_copy_state()
    cfg = AdmmConfig(rho=1.0)
    state.z[:] = 0.0
    for s, x in zip(subs.all(), state.x):
        x[:] = 0.0
        x[s.copies] = 0.5
    dual_update(state, subs, layout, cfg)
    assert all(np.allclose(lam, 0.5) for lam in state.lam)
    dual_update(state, subs, layout, cfg)
    assert all(np.allclose(lam, 1.0) for lam in state.lam)
    before = [lam.copy() for lam in state.lam]
    state.z[:] = 0.5
    dual_update(state, subs, layout, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, state.lam))
    assert primal_residual(state, subs, layout) == 0.0


def test_infinite_threshold_stops_after_one_iteration():
    res = run_admm(_agg(4, N=2, K=8, W=2), AdmmConfig(obj_tol=np.inf))
    assert res.iterations == 1 and len(res.trace) == 1


def test_iteration_cap_flags_result():
    res = run_admm(_agg(4, N=2, K=8, W=2), AdmmConfig(max_iters=2))
    assert res.status is QpStatus.ITER_LIMIT and not res.converged and res.iterations == 2


@pytest.mark.parametrize("seed", range(10))
def test_matches_centralized_solve(seed):
    K, W = (12, 16, 20, 24)[seed % 4], (2, 3, 4)[seed % 3]
    agg = build_aggregated_model(*desk_case(seed, K=K, W=W), build_tail_map(K, max(2, K // 4)))
    ref = solve(agg.problem, tol=1e-10).objective
    res = run_admm(agg, AdmmConfig(rho=1.0, max_iters=2000))
    assert res.converged
    assert abs(res.objective - ref) <= 5e-3 * abs(ref)
    last = res.trace[-1]
    z_norm = np.linalg.norm(res.state.z)
    assert last.primal_residual <= 1e-3 * z_norm


def test_objective_matches_reevaluation():
    agg = _agg(7, N=2, K=10, W=2)
    subs, layout = split_consensus(agg)
    res = run_admm(agg, AdmmConfig(max_iters=15), split=(subs, layout))
    x = np.zeros(agg.problem.num_vars)
    pdiag = agg.problem.P.diagonal()
    costed = set(np.flatnonzero((agg.problem.c != 0) | (pdiag != 0)).tolist())
    for s, xs in zip(subs.all(), res.state.x):
        for key, v in zip(s.keys, xs):
            j = _source(agg, key)
            if j in costed:
                x[j] = v
    assert admm_objective(subs, res.state.x) == pytest.approx(agg.problem.objective(x), rel=1e-6)
    assert res.objective == pytest.approx(res.trace[-1].objective)


def test_threads_and_batched_agree():
    agg = _agg(9, N=2, K=8, W=2)
    a = run_admm(agg, AdmmConfig(max_iters=20))
    b = run_admm(agg, replace(AdmmConfig(max_iters=20), execution="threads"))
    assert a.objective == pytest.approx(b.objective, rel=1e-4)


def test_config_validation():
    for bad in (dict(rho=0), dict(max_iters=0), dict(obj_tol=0), dict(execution="gpu")):
        with pytest.raises(ValueError):
            AdmmConfig(**bad)


def test_trace_file(tmp_path):
    res = run_admm(_agg(5, N=1, K=6, W=1), AdmmConfig(max_iters=3))
    path = tmp_path / "trace.csv"
    write_trace(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:3] == ["iteration", "objective", "primal_residual"]
    assert len(lines) == 1 + res.iterations
