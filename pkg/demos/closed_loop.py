"""Short closed-loop comparison of the full and aggregated controllers.

Both controllers face the same realization. Prints per-step time, ex-post
imbalance cost and level violations, and writes each run's logs under
``runs/``.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from cascade_mpc import reference_instance
from cascade_mpc.simulate import load_config, simulate

HERE = Path(__file__).parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episode", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()

    instance = reference_instance()
    base = replace(load_config(HERE / "desk.json"), episode=args.episode, seed=args.seed)
    for controller in ("full", "aggregated"):
        log = simulate(instance, replace(base, controller=controller))
        summary = log.write(Path(args.out) / controller)
        print(f"{controller:<11} {log.mean_step_time:8.3f} s/step  "
              f"cost {summary['total_cost']:10.2f} EUR  violations {summary['violations']}")


if __name__ == "__main__":
    main()
