import json
from dataclasses import replace

import numpy as np
import pytest

from cascade_mpc.bounds import AlgoConfig
from cascade_mpc.cli import main
from cascade_mpc.model import InputError, build_full_model, instance_to_dict, reference_instance
from cascade_mpc.qp import solve
from cascade_mpc.scenarios import GeneratorSpec
from cascade_mpc.simulate import (SimConfig, benchmark, config_from_dict, config_to_dict,
                                  first_window, settle, simulate, write_bench)

REF = reference_instance()
SMALL = SimConfig(episode=4, horizon=12, scenarios=2, controller="full", algo=AlgoConfig.desk(12))


def _calm(spec):
    calm = lambda p: replace(p, noise=0.0)
    return GeneratorSpec(tuple(calm(p) for p in spec.inflow), calm(spec.vres),
                         calm(spec.price_up), calm(spec.price_down))


@pytest.fixture(scope="module")
def episode():
    return simulate(REF, SMALL)


def test_log_length_and_ranges(episode):
    assert len(episode) == 4
    for n, p in enumerate(REF.plants):
        assert (episode.q_tr[:, n] >= p.turbine_min - 1e-9).all()
        assert (episode.q_tr[:, n] <= p.turbine_max + 1e-9).all()
        assert (episode.q_br[:, n] >= p.barrage_min - 1e-9).all()


def test_physics_consistency(episode):
    real = episode.realization
    dt = REF.sampling
    prev = np.array([p.level_min for p in REF.plants])
    for t in range(len(episode)):
        for n, p in enumerate(REF.plants):
            if episode.violation[t, n]:
                continue
            expect = prev[n] + (episode.inflow[t, n] - episode.q_tr[t, n] - episode.q_br[t, n]) \
                * dt / p.surface_area
            assert abs(episode.level[t, n] - expect) <= 1e-9
        assert episode.inflow[t, 0] == real.ext_inflow[0, t]
        prev = episode.level[t]


def test_settlement_consistency(episode):
    real = episode.realization
    for t in range(len(episode)):
        expect = real.price_up[t] * episode.d_up[t] - real.price_down[t] * episode.d_dn[t]
        assert abs(episode.cost[t] - expect) <= 1e-9
        net = episode.offer - real.vres_power[t] * REF.hours - episode.p_h[t].sum() * REF.hours
        assert episode.d_up[t] - episode.d_dn[t] == pytest.approx(net, abs=1e-9)


def test_settle_signs():
    assert settle(10.0, 0.0, [2.0], 50.0, 20.0, 1.0) == (8.0, 0.0, 400.0)
    assert settle(10.0, 0.0, [14.0], 50.0, 20.0, 1.0) == (0.0, 4.0, -80.0)


def test_single_period_episode():
    log = simulate(REF, replace(SMALL, episode=1))
    assert len(log) == 1 and len(log.bounds) == 1


def test_byte_identical_logs(tmp_path):
    cfg = replace(SMALL, episode=2, controller="aggregated")
    for d in ("a", "b"):
        simulate(REF, cfg).write(tmp_path / d)
    for name in ("episode.csv", "bounds.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_noise_first_step_matches_prediction():
    cfg = replace(SMALL, episode=1, scenarios=1, generator=_calm(GeneratorSpec.desk(REF)))
    log = simulate(REF, cfg)
    scen, market, state = first_window(REF, cfg)
    h = build_full_model(REF, scen, replace(market, alpha=cfg.algo.alpha), state)
    s = h.series(solve(h.problem, tol=1e-10).primal)
    # identical physics: the realized level is the predicted one
    np.testing.assert_allclose(log.level[0], s["l"][0, :, 0], atol=1e-6)
    # power differs only by the envelope relaxation
    for n, p in enumerate(REF.plants):
        C = REF.power_coefficient(n)
        width = C * (p.turbine_max - p.turbine_min) * (p.head_max - p.head_min) / 2
        assert log.p_h[0, n] <= s["p_h"][0, n, 0] + 1e-6
        assert s["p_h"][0, n, 0] - log.p_h[0, n] <= width


def test_peak_prices_draw_down_storage():
    gen = _calm(GeneratorSpec.desk(REF))
    gen = replace(gen, price_up=replace(gen.price_up, amplitude=60.0, phase=-6.0),
                  price_down=replace(gen.price_down, amplitude=30.0, phase=-6.0))
    cfg = SimConfig(episode=30, horizon=30, scenarios=1, controller="full",
                    initial_levels="mid", generator=gen, algo=AlgoConfig.desk(30))
    log = simulate(REF, cfg)
    price = log.realization.price_up[:30]
    outflow = log.q_tr[:, 0] + log.q_br[:, 0]
    surplus = outflow - log.inflow[:, 0]
    hi, lo = price >= np.quantile(price, 0.7), price <= np.quantile(price, 0.3)
    assert surplus[hi].mean() > surplus[lo].mean()


def test_benchmark_report(tmp_path):
    cfg = replace(SMALL, episode=1)
    rows = benchmark(REF, cfg, ("full", "aggregated"))
    assert [r.controller for r in rows] == ["full", "aggregated"]
    assert rows[0].speedup == 0.0
    write_bench(rows, tmp_path / "bench.csv")
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 3
    with pytest.raises(InputError):
        benchmark(REF, cfg, ("full",))


def test_config_round_trip_and_errors():
    again = config_from_dict(json.loads(json.dumps(config_to_dict(SMALL))))
    assert again == SMALL
    with pytest.raises(InputError, match="horizn"):
        config_from_dict({"horizn": 5})
    with pytest.raises(InputError, match="rh0"):
        config_from_dict({"algorithm": {"admm": {"rh0": 1}}})


def test_cli_smoke(tmp_path, capsys):
    inst = tmp_path / "ref.json"
    inst.write_text(json.dumps(instance_to_dict(REF)))
    cfg = tmp_path / "desk.json"
    cfg.write_text(json.dumps(config_to_dict(replace(SMALL, controller="aggregated"))))
    base = ["--instance", str(inst), "--config", str(cfg), "--seed", "7"]
    assert main(["solve-once", *base]) == 0
    out = capsys.readouterr().out
    assert "plant 2" in out and "F_LB" in out and "eps" in out
    assert main(["simulate", *base, "--episode", "2", "--out", str(tmp_path / "sim")]) == 0
    assert (tmp_path / "sim" / "episode.csv").is_file()
    assert main(["gap-trace", *base, "--out", str(tmp_path / "gap")]) == 0
    assert (tmp_path / "gap" / "gap_trace.csv").is_file()
    assert main(["bench", *base, "--episode", "1", "--controller", "full",
                 "--controller", "aggregated", "--out", str(tmp_path / "bench")]) == 0
    lines = (tmp_path / "bench" / "bench.csv").read_text().splitlines()
    assert len(lines) == 3


def test_cli_missing_instance(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["solve-once", "--instance", str(missing)]) != 0
    assert str(missing) in capsys.readouterr().err
