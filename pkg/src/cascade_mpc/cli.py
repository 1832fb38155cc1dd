"""
Command-line front end: ``cascade-mpc {solve-once,simulate,bench,gap-trace}``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .bounds import CONTROLLERS, mpc_step, run_algorithm1, write_bounds
from .model import InputError, load_instance, reference_instance
from .simulate import SimConfig, benchmark, first_window, load_config, simulate, write_bench


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--instance", help="instance JSON (default: packaged reference cascade)")
    common.add_argument("--config", help="configuration JSON (default: desk-scale settings)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--episode", type=int, help="override the episode length")

    p = argparse.ArgumentParser(prog="cascade-mpc", description=__doc__.strip())
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("solve-once", "one MPC step: action and bounds"),
                       ("simulate", "closed-loop episode, CSV logs"),
                       ("gap-trace", "bounds against outer iteration for the first step")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--controller", choices=CONTROLLERS, help="override the configured controller")
    s = sub.add_parser("bench", parents=[common], help="compare controllers on one realization")
    s.add_argument("--controller", choices=CONTROLLERS, action="append",
                   help="controller to include (repeat; default: full and distributed)")
    return p


def _setup(args):
    instance = load_instance(args.instance) if args.instance else reference_instance()
    config = load_config(args.config) if args.config else SimConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.episode is not None:
        config = replace(config, episode=args.episode)
    if getattr(args, "controller", None) and isinstance(args.controller, str):
        config = replace(config, controller=args.controller)
    return instance, config


def _print_bounds(record) -> None:
    print(f"{'j':>3} {'R':>4} {'F_LB':>16} {'F_UB':>16} {'eps %':>10} {'admm':>6}")
    for r in record:
        print(f"{r.j:>3} {r.R:>4} {r.lower:>16.6f} {r.upper:>16.6f} {r.gap:>10.4f} "
              f"{r.admm_iterations:>6}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        instance, config = _setup(args)
        out = Path(args.out) if args.out else None
        if args.command == "solve-once":
            scen, market, state = first_window(instance, config)
            step = mpc_step(config.controller, instance, scen, market, state, config.algo)
            for n in range(instance.num_plants):
                print(f"plant {n}: q_tr = {step.control.q_tr[n]:.6f} m3/s, "
                      f"q_br = {step.control.q_br[n]:.6f} m3/s")
            if step.result is not None:
                r = step.result
                print(f"F_LB = {r.lower:.6f}  F_UB = {r.upper:.6f}  eps = {r.gap:.6f} %")
                if out:
                    out.mkdir(parents=True, exist_ok=True)
                    write_bounds(r.record, out / "bounds.csv")
            print(f"wall time {step.wall_time:.3f} s")
        elif args.command == "gap-trace":
            scen, market, state = first_window(instance, config)
            algo = config.algo
            if config.controller == "aggregated":
                algo = replace(algo, lb_source="direct")
            res = run_algorithm1(instance, scen, market, state, algo)
            _print_bounds(res.record)
            out = out or Path(".")
            out.mkdir(parents=True, exist_ok=True)
            write_bounds(res.record, out / "gap_trace.csv")
        elif args.command == "simulate":
            log = simulate(instance, config,
                           lambda t, w: print(f"t={t} step {w:.3f} s", file=sys.stderr))
            summary = log.write(out or Path("."))
            print(f"total cost {summary['total_cost']:.6f} EUR, "
                  f"{summary['violations']} level violations, "
                  f"mean step {log.mean_step_time:.3f} s")
        elif args.command == "bench":
            controllers = args.controller or ["full", "distributed"]
            rows = benchmark(instance, config, controllers,
                             lambda t, w: print(f"t={t} step {w:.3f} s", file=sys.stderr))
            print(f"{'controller':<12} {'mean step s':>12} {'total cost':>14} {'speedup %':>10}")
            for r in rows:
                print(f"{r.controller:<12} {r.mean_step_time:>12.4f} {r.total_cost:>14.4f} "
                      f"{r.speedup:>10.2f}")
            out = out or Path(".")
            out.mkdir(parents=True, exist_ok=True)
            write_bench(rows, out / "bench.csv")
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
