"""``metafed`` command line: run, sweep, ablate, gen-data.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import export_split
from .errors import ConfigError, ParseError
from .harness import (
    ABLATION_MODES,
    SWEEP_AXES,
    ExperimentConfig,
    build_split,
    dump_config,
    load_config,
    run_ablation,
    run_experiment,
    run_sweep,
)
from .protocol import HyperParams


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metafed", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--mode", help="override training mode")

    common(sub.add_parser("run", help="run one configuration over all seeds"))
    sp = sub.add_parser("sweep", help="sweep one hyperparameter axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--grid", help="comma-separated grid values (defaults per axis)")
    sp = sub.add_parser("ablate", help="paired comparison over all modes")
    common(sp)
    sp.add_argument("--modes", help=f"comma-separated subset of {','.join(ABLATION_MODES)}")
    common(sub.add_parser("gen-data", help="write each federation's train/valid/test CSVs"))
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed:
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seed))
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    if args.mode:
        cfg = dataclasses.replace(cfg, hp=dataclasses.replace(cfg.hp, mode=args.mode))
    return cfg


def _grid(axis: str, raw: str | None):
    if raw is None:
        return None
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if axis in ("lambda0", "l_t1"):
        return [float(s) for s in items]
    if axis == "budget":
        return [int(s) for s in items]
    if axis == "share_norm":
        return [s.lower() in ("1", "true", "yes") for s in items]
    return items


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.print_defaults:
        sys.stdout.write(dump_config(ExperimentConfig()))
        return 0
    if args.command is None:
        _parser().print_usage(sys.stderr)
        return 1
    try:
        cfg = _config(args)
        out = Path(cfg.out)
        if args.command == "run":
            summary = run_experiment(cfg, out)
            print(f"{summary['mode']}: mean test acc {summary['mean_test_acc']:.4f} "
                  f"+- {summary['std_test_acc']:.4f} over {len(cfg.seeds)} seed(s) -> {out}")
        elif args.command == "sweep":
            rows = run_sweep(cfg, args.axis, _grid(args.axis, args.grid), out_dir=out)
            for r in rows:
                print(f"{r['axis']}={r['value']!s:<18} {r['mode']:<18} {r['mean_test_acc']:.4f} bytes={r['total_bytes']}")
        elif args.command == "ablate":
            modes = tuple(args.modes.split(",")) if args.modes else ABLATION_MODES
            for r in run_ablation(cfg, modes, out_dir=out):
                print(f"{r['mode']:<18} {r['mean_test_acc']:.4f} +- {r['std_test_acc']:.4f} bytes={r['total_bytes']}")
        elif args.command == "gen-data":
            for seed in cfg.seeds:
                split = build_split(cfg.dataset, seed)
                export_split(split, out / f"seed{seed}")
                print(f"seed {seed}: {len(split)} federations, checksum {split.checksum()} -> {out / f'seed{seed}'}")
    except (ConfigError, ParseError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure during a run maps to exit code 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
