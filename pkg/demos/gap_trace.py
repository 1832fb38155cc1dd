"""Bounds against outer iteration for the first window of the desk episode.

Uses centralized lower bounds so the run finishes in seconds; pass
``--admm`` to compute them with the distributed routine instead.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from cascade_mpc import reference_instance, run_algorithm1
from cascade_mpc.bounds import write_bounds
from cascade_mpc.simulate import first_window, load_config

HERE = Path(__file__).parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--admm", action="store_true", help="ADMM lower bounds")
    ap.add_argument("--out", default="gap_trace.csv")
    args = ap.parse_args()

    instance = reference_instance()
    config = load_config(HERE / "desk.json")
    algo = replace(config.algo, lb_source="admm" if args.admm else "direct")
    scen, market, state = first_window(instance, config)
    res = run_algorithm1(instance, scen, market, state, algo)
    for r in res.record:
        print(f"j={r.j:2d}  R={r.R:3d}  LB={r.lower:12.2f}  UB={r.upper:12.2f}  gap={r.gap:7.3f} %")
    print("first-stage turbine discharge (m3/s):", res.control.q_tr.round(2))
    write_bounds(res.record, args.out)


if __name__ == "__main__":
    main()
