"""Experiment runner: INI configs, seeded runs, sweeps and ablations.

Every run writes a per-seed trace CSV and summary JSON into the output
directory, plus an aggregate ``summary.json`` (mean and std of the average
personalized test accuracy across seeds). Nothing time-dependent is written,
so identical configs produce identical files.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FederatedSplit, PartitionSpec, gaussian_pool, gen_feature_shift, gen_label_shift, load_csv
from .errors import ConfigError, PartitionError
from .protocol import HyperParams, RunResult, comm_cost, hyperparams_dict, run, summary_json

log = logging.getLogger(__name__)

DATASET_KINDS = ("label_shift", "feature_shift", "csv")
SWEEP_AXES = ("lambda0", "l_t1", "tap", "share_norm", "order", "budget")
DEFAULT_GRIDS = {
    "lambda0": [0.1, 1.0, 5.0, 10.0],
    "l_t1": [0.0, 0.4, 0.5, 0.6, 1.1],
    "tap": ["last_hidden_block", "penultimate", "combined"],
    "share_norm": [True, False],
    "order": ["index", "random"],
    "budget": [1, 2, 3, 5, 10],
}
ABLATION_MODES = ("metafed", "finetune_ablation", "no_stage1", "no_stage2", "fedavg", "fedprox", "fedbn", "local")


@dataclass
class DatasetConfig:
    kind: str = "label_shift"
    federations: int = 20
    num_classes: int = 10
    dim: int = 20
    # label_shift
    n_samples: int = 6000
    alpha: float = 0.5
    fractions: tuple[float, float, float] = (0.4, 0.3, 0.3)
    # feature_shift
    shift_scale: float = 1.0
    n_per_federation: int = 1000
    separation: float = 2.0
    # csv
    path: str = ""

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("csv dataset needs a path")
        self.fractions = tuple(float(f) for f in self.fractions)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hp: HyperParams = field(default_factory=HyperParams)
    seeds: tuple[int, ...] = (0, 1, 2)
    hidden: tuple[int, ...] = (64, 64)
    out: str = "runs/default"
    # total Stage-I gradient steps (rounds x local_iters) held fixed by the budget sweep
    budget_steps: int = 300

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)


def label_shift_benchmark(**hp) -> ExperimentConfig:
    """20 federations, Dirichlet(0.5) over 10 classes, 6000 samples in 20 dims."""
    return ExperimentConfig(DatasetConfig(), HyperParams(**hp))


def feature_shift_benchmark(**hp) -> ExperimentConfig:
    """4 federations under per-federation affine input shift, 10/10/20 kept."""
    ds = DatasetConfig(kind="feature_shift", federations=4, num_classes=5, dim=20, shift_scale=1.0)
    return ExperimentConfig(ds, HyperParams(**hp))


# -- config files --------------------------------------------------------------

def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(int(s) for s in items)
    return raw


def _parse_hp_value(key: str, raw: str, default):
    raw = raw.strip()
    if key == "order":
        return raw if raw in ("index", "random") else tuple(int(s) for s in raw.split(","))
    if key == "groups":
        if not raw or raw.lower() == "none":
            return None
        return tuple(tuple(int(i) for i in g.split(",")) for g in raw.split(";"))
    return _parse_value(raw, default)


def _fill(cls, section, parse=_parse_value):
    defaults = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        try:
            kwargs[key] = parse(key, raw, getattr(defaults, key)) if parse is _parse_hp_value \
                else parse(raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Read an INI file with optional ``[dataset]``, ``[train]`` and ``[experiment]`` sections."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(parser.sections()) - {"dataset", "train", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    ds = _fill(DatasetConfig, parser["dataset"]) if parser.has_section("dataset") else DatasetConfig()
    hp = _fill(HyperParams, parser["train"], _parse_hp_value) if parser.has_section("train") else HyperParams()
    exp = {}
    if parser.has_section("experiment"):
        base = ExperimentConfig()
        for key, raw in parser["experiment"].items():
            if key not in ("seeds", "hidden", "out", "budget_steps"):
                raise ConfigError(f"unknown key {key!r} in [experiment]")
            try:
                exp[key] = _parse_value(raw, getattr(base, key))
            except ValueError as exc:
                raise ConfigError(f"[experiment] {key}: {exc}") from None
    return ExperimentConfig(ds, hp, **exp)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(",".join(str(i) for i in g) for g in v)
        return ",".join(str(i) for i in v)
    if v is None:
        return "none"
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["[dataset]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.dataset, f.name))}" for f in dataclasses.fields(cfg.dataset)]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {_fmt(getattr(cfg.hp, f.name))}" for f in dataclasses.fields(cfg.hp)]
    lines += ["", "[experiment]"]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in ("seeds", "hidden", "out", "budget_steps")]
    return "\n".join(lines) + "\n"


# -- running -------------------------------------------------------------------

def build_split(ds: DatasetConfig, seed: int) -> FederatedSplit:
    if ds.kind == "label_shift":
        pool = gaussian_pool(ds.n_samples, ds.num_classes, ds.dim, seed, separation=ds.separation)
        return gen_label_shift(pool, PartitionSpec(ds.federations, ds.alpha, ds.fractions, seed))
    if ds.kind == "feature_shift":
        return gen_feature_shift(ds.num_classes, ds.dim, ds.federations, ds.shift_scale, seed,
                                 n_per_federation=ds.n_per_federation, separation=ds.separation)
    pool = load_csv(ds.path)
    return gen_label_shift(pool, PartitionSpec(ds.federations, ds.alpha, ds.fractions, seed))


def _mean_std(values):
    values = [float(v) for v in values]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def run_seeds(cfg: ExperimentConfig, hp: HyperParams | None = None, out_dir=None, tag: str = "") -> dict:
    """Run one configuration over all seeds. Writes files only when ``out_dir`` is given."""
    hp = hp or cfg.hp
    per_seed = []
    for seed in cfg.seeds:
        entry = {"seed": seed}
        try:
            split = build_split(cfg.dataset, seed)
            entry["split_checksum"] = split.checksum()
            result: RunResult = run(split, hp, seed, cfg.hidden)
        except PartitionError as exc:
            log.warning("seed %d: %s", seed, exc)
            entry["error"] = str(exc)
            per_seed.append(entry)
            continue
        entry.update(
            average_test_acc=result.mean_test,
            per_federation_test_acc=[float(a) for a in result.test_acc],
            **comm_cost(result.trace),
        )
        entry["result"] = result
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            result.trace.to_csv(out / f"trace{tag}_seed{seed}.csv")
            (out / f"summary{tag}_seed{seed}.json").write_text(
                summary_json(result, seed=seed, split_checksum=entry["split_checksum"],
                             hyperparams=hyperparams_dict(hp)) + "\n")
        per_seed.append(entry)
    mean, std = _mean_std(e["average_test_acc"] for e in per_seed if "error" not in e)
    return {"mode": hp.mode, "mean_test_acc": mean, "std_test_acc": std, "seeds": per_seed}


def _public(summary: dict) -> dict:
    return {**summary, "seeds": [{k: v for k, v in e.items() if k != "result"} for e in summary["seeds"]]}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Per-seed trace/summary files plus ``summary.json`` with mean and std over seeds."""
    out = Path(out_dir or cfg.out)
    summary = run_seeds(cfg, out_dir=out)
    summary["hyperparams"] = hyperparams_dict(cfg.hp)
    (out / "summary.json").write_text(json.dumps(_public(summary), indent=2, sort_keys=True) + "\n")
    return summary


def _grid_point(cfg: ExperimentConfig, axis: str, value, mode: str | None = None) -> HyperParams:
    hp = dataclasses.replace(cfg.hp, mode=mode or cfg.hp.mode)
    if axis == "budget":
        rounds = int(value)
        if cfg.budget_steps % rounds:
            raise ConfigError(f"budget_steps={cfg.budget_steps} is not divisible by rounds={rounds}")
        return dataclasses.replace(hp, rounds_stage1=rounds, local_iters=cfg.budget_steps // rounds)
    return dataclasses.replace(hp, **{axis: value})


def _write_table(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in row.items()})


def _row(summary: dict, **lead) -> dict:
    ok = [e for e in summary["seeds"] if "error" not in e]
    return {
        **lead,
        "mode": summary["mode"],
        "mean_test_acc": summary["mean_test_acc"],
        "std_test_acc": summary["std_test_acc"],
        "total_bytes": int(np.mean([e["bytes"] for e in ok])) if ok else None,
        "payloads": int(np.mean([e["payloads"] for e in ok])) if ok else None,
        "per_federation_test_acc": [float(a) for a in np.mean([e["per_federation_test_acc"] for e in ok], axis=0)]
        if ok else None,
        "split_checksums": [e.get("split_checksum") for e in summary["seeds"]],
        "errors": [e["error"] for e in summary["seeds"] if "error" in e],
    }


def run_sweep(cfg: ExperimentConfig, axis: str, grid=None, out_dir=None) -> list[dict]:
    """One row per grid point; the budget axis also gets a FedAvg row per point.

    Budget rows hold ``rounds * local_iters`` at ``cfg.budget_steps``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    grid = list(DEFAULT_GRIDS[axis] if grid is None else grid)
    if not grid:
        raise ConfigError(f"empty grid for axis {axis!r}")
    rows = []
    for value in grid:
        modes = [cfg.hp.mode, "fedavg"] if axis == "budget" else [cfg.hp.mode]
        for mode in modes:
            hp = _grid_point(cfg, axis, value, mode)
            lead = {"axis": axis, "value": value}
            if axis == "budget":
                lead.update(rounds=hp.rounds_stage1, local_iters=hp.local_iters,
                            steps=hp.rounds_stage1 * hp.local_iters)
            rows.append(_row(run_seeds(cfg, hp), **lead))
    if axis == "budget":
        assert len({r["steps"] for r in rows}) == 1, "budget rows must share rounds * local_iters"
    if out_dir is not None:
        _write_table(rows, Path(out_dir) / f"sweep_{axis}.csv")
        (Path(out_dir) / f"sweep_{axis}.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows


def run_ablation(cfg: ExperimentConfig, modes=ABLATION_MODES, out_dir=None) -> list[dict]:
    """Every mode on the same splits and seeds, so rows are paired."""
    rows = [_row(run_seeds(cfg, dataclasses.replace(cfg.hp, mode=m))) for m in modes]
    if out_dir is not None:
        _write_table(rows, Path(out_dir) / "ablation.csv")
        (Path(out_dir) / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
