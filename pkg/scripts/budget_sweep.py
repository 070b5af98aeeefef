"""Accuracy vs number of communication rounds at a fixed total step budget."""

import argparse
import dataclasses

from metafed.harness import feature_shift_benchmark, label_shift_benchmark, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--benchmark", choices=["label_shift", "feature_shift"], default="label_shift")
    ap.add_argument("--rounds", type=int, nargs="+", default=[1, 2, 3, 5, 10])
    ap.add_argument("--steps", type=int, default=300, help="rounds x local_iters, held fixed")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/budget")
    args = ap.parse_args()

    make = label_shift_benchmark if args.benchmark == "label_shift" else feature_shift_benchmark
    cfg = dataclasses.replace(make(), seeds=tuple(args.seeds), budget_steps=args.steps)
    rows = run_sweep(cfg, "budget", args.rounds, out_dir=args.out)
    acc = {(r["mode"], r["rounds"]): r["mean_test_acc"] for r in rows}
    print(f"{'rounds':>6} {'metafed':>8} {'fedavg':>8}")
    for n in args.rounds:
        print(f"{n:>6} {100 * acc['metafed', n]:8.2f} {100 * acc['fedavg', n]:8.2f}")


if __name__ == "__main__":
    main()
