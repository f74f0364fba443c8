"""Train every solver of a config over several seeds and print per-seed and
median validation MSE plus epochs to the final +-10% band.

    python scripts/compare_solvers.py configs/magnetics.json --seeds 0 1 2
"""
import argparse
import json
import time

from embinv.experiments import compare_solvers, median_table


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    args = p.parse_args(argv)
    t0 = [time.perf_counter()]

    def show(tag, solver, row):
        now = time.perf_counter()
        print(f"seed {row['seed']} {tag} {solver}: mse {row['val_mse']:.5g} band {row['band']} ({now - t0[0]:.0f} s)", flush=True)
        t0[0] = now

    res = compare_solvers(args.config, args.seeds, args.epochs, show)
    print(json.dumps({"val_mse": median_table(res), "band": median_table(res, "band")}, indent=1))


if __name__ == "__main__":
    main()
