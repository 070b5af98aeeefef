"""Paired ablation of the two stages on the label-shift benchmark."""

import argparse
import dataclasses

from metafed.harness import label_shift_benchmark, run_ablation

MODES = ("metafed", "finetune_ablation", "no_stage1", "no_stage2", "local")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg = dataclasses.replace(label_shift_benchmark(), seeds=tuple(args.seeds))
    for r in run_ablation(cfg, MODES, out_dir=args.out):
        print(f"{r['mode']:<18} {100 * r['mean_test_acc']:6.2f} +- {100 * r['std_test_acc']:5.2f}")


if __name__ == "__main__":
    main()
