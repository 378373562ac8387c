"""Batch experiment runner: ``dualnet run`` and ``dualnet plot``.

Configuration is a flat ``key = value`` text file; command-line flags
override file values. Every (setting, seed) cell writes one NDJSON run log
and one row of the aggregated ``results.csv``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backbone import ArchConfig
from .container import FormatError
from .model import save_checkpoint
from .stream import build_split_benchmark, load_dataset, synthetic_dataset
from .trainer import TrainConfig, train_er_baseline, train_stream

logger = logging.getLogger(__name__)

LEARNERS = ("dualnet", "er", "er-soft")
CSV_FIELDS = ["run_id", "protocol", "objective", "n", "memory", "seed", "ACC", "FM", "LA"]


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    synthetic_classes: int = 10
    synthetic_per_class: int = 300
    resolution: int = 32
    benchmark_seed: int = 0
    classes_per_task: int = 2
    tasks: int = 5
    protocol: str = "ta"
    rho: float = 1.0
    holdout_validation: bool = False
    learner: str = "dualnet"
    objective: str = "barlow_twins"
    n: list[int] = field(default_factory=lambda: [3])
    memory: str = "ring:10"
    seeds: list[int] = field(default_factory=lambda: [0])
    batch_size: int = 10
    inner_updates: int | None = None
    lambda_tr: float | None = None
    tau: float = 2.0
    lambda_bt: float = 2e-3
    replay_batch: int = 10
    fast_lr: float = 0.03
    slow_lr: float = 3e-4
    lookahead_beta: float = 0.5
    lookahead_k: int = 2
    momentum: float = 0.0
    augment_supervised: bool = False
    modulate: bool = True
    soft_loss: str = "kl"
    wall_clock: bool = False
    checkpoints: bool = False
    out: str = "runs"
    parallel: int = 1

    # ------------------------------------------------------------ parsing
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str) -> None:
            if not cond:
                raise ConfigError(name, msg)

        need(self.protocol in ("ta", "tf"), "protocol", f"expected ta|tf, got {self.protocol!r}")
        need(self.learner in LEARNERS, "learner", f"expected one of {'|'.join(LEARNERS)}, got {self.learner!r}")
        need(
            self.objective in ("barlow_twins", "simclr", "classification"),
            "objective",
            f"expected barlow_twins|simclr|classification, got {self.objective!r}",
        )
        need(0.0 < self.rho <= 1.0, "rho", f"must lie in (0, 1], got {self.rho}")
        need(bool(self.seeds), "seeds", "at least one seed is required")
        need(bool(self.n) and all(v >= 0 for v in self.n), "n", "expected non-negative integers")
        need(self.tasks >= 1, "tasks", "must be at least 1")
        need(self.classes_per_task >= 1, "classes_per_task", "must be at least 1")
        need(self.parallel >= 1, "parallel", "must be at least 1")
        need(self.soft_loss in ("kl", "l2"), "soft_loss", f"expected kl|l2, got {self.soft_loss!r}")
        policy, slots = self.memory_spec()
        if policy == "ring":
            need(self.protocol == "ta", "memory", "ring buffers are per task; use reservoir:<k> with protocol tf")
        for name in ("tau", "lambda_bt", "fast_lr", "slow_lr", "momentum"):
            v = getattr(self, name)
            need(np.isfinite(v) and v >= 0, name, f"must be finite and non-negative, got {v}")
        need(self.tau > 0, "tau", "must be positive")
        if self.inner_updates is not None:
            need(self.inner_updates >= 1, "inner_updates", "must be at least 1")
        if self.lambda_tr is not None:
            need(np.isfinite(self.lambda_tr) and self.lambda_tr >= 0, "lambda_tr", "must be finite and non-negative")
        need(0.0 <= self.lookahead_beta <= 1.0, "lookahead_beta", "must lie in [0, 1]")
        need(self.lookahead_k >= 1, "lookahead_k", "must be at least 1")
        if self.dataset != "synthetic":
            need(Path(self.dataset).is_file(), "dataset", f"no such file {self.dataset!r}")

    def memory_spec(self) -> tuple[str, int]:
        policy, _, k = self.memory.partition(":")
        if policy not in ("ring", "reservoir") or not k.isdigit() or int(k) < 1:
            raise ConfigError("memory", f"expected ring:<k> or reservoir:<k>, got {self.memory!r}")
        return policy, int(k)

    # -------------------------------------------------------------- cells
    def cells(self) -> list[tuple[str, int, int]]:
        """(run_id, n, seed) for every grid cell, in execution order."""
        ns = self.n if self.learner == "dualnet" else [0]
        policy, k = self.memory_spec()
        out = []
        for n in ns:
            for seed in self.seeds:
                rid = f"{self.learner}-{self.protocol}-{self.objective}-n{n}-{policy}{k}-rho{self.rho:g}-s{seed}"
                out.append((rid, n, seed))
        return out

    def train_config(self, n: int) -> TrainConfig:
        policy, k = self.memory_spec()
        lam = self.lambda_tr if self.lambda_tr is not None else (0.0 if self.learner == "er" else 2.0)
        # baselines take two gradient updates per batch; the dual learner one
        updates = self.inner_updates if self.inner_updates is not None else (1 if self.learner == "dualnet" else 2)
        return TrainConfig(
            protocol=self.protocol,
            n_ssl_iters=n,
            inner_updates=updates,
            lambda_tr=lam,
            tau=self.tau,
            lambda_bt=self.lambda_bt,
            replay_batch=self.replay_batch,
            ssl_batch=self.replay_batch,
            batch_size=self.batch_size,
            slow_inner_lr=self.slow_lr,
            lookahead_beta=self.lookahead_beta,
            lookahead_k=self.lookahead_k,
            fast_lr=self.fast_lr,
            momentum=self.momentum,
            objective=self.objective,
            augment_supervised=self.augment_supervised,
            modulate=self.modulate,
            soft_loss=self.soft_loss,
            memory_policy=policy,
            memory_slots=k,
            rho=self.rho,
            record_wall_time=self.wall_clock,
            arch=ArchConfig(resolution=self.resolution),
        )


def _coerce(name: str, raw: str):
    """Convert a raw string to the type of ``ExperimentConfig.<name>``."""
    default = {f.name: f for f in fields(ExperimentConfig)}[name]
    probe = ExperimentConfig()
    current = getattr(probe, name)
    raw = raw.strip()
    try:
        if name in ("n", "seeds"):
            return [int(v) for v in raw.split(",") if v.strip()]
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if name in ("lambda_tr", "inner_updates") and raw.lower() in ("", "none", "default"):
            return None
        if name == "inner_updates":
            return int(raw)
        if name == "lambda_tr":
            return float(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {default.type}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    known = set(ExperimentConfig.keys())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)
    return values


def build_config(config_path: str | None, overrides: dict[str, str]) -> ExperimentConfig:
    values: dict[str, object] = {}
    if config_path:
        try:
            values.update(parse_config_text(Path(config_path).read_text()))
        except OSError as exc:
            raise ConfigError("config", str(exc)) from None
    for key, raw in overrides.items():
        values[key] = _coerce(key, raw)
    cfg = replace(ExperimentConfig(), **values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- running
def _load_benchmark(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic":
        data = synthetic_dataset(cfg.synthetic_classes, cfg.synthetic_per_class, cfg.resolution, cfg.benchmark_seed)
    else:
        data = load_dataset(cfg.dataset)
    return build_split_benchmark(
        data, cfg.classes_per_task, cfg.tasks, cfg.benchmark_seed, holdout_validation=cfg.holdout_validation
    )


def run_cell(cfg: ExperimentConfig, run_id: str, n: int, seed: int, benchmark=None) -> dict:
    benchmark = benchmark if benchmark is not None else _load_benchmark(cfg)
    trainer = train_stream if cfg.learner == "dualnet" else train_er_baseline
    result = trainer(benchmark, cfg.train_config(n), seed)
    out = Path(cfg.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "logs" / f"{run_id}.ndjson").write_text(result.log_text())
    if cfg.checkpoints:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.model, out / "checkpoints" / f"{run_id}.ckpt")
    m = result.metrics
    return {
        "run_id": run_id, "protocol": cfg.protocol, "objective": cfg.objective if cfg.learner == "dualnet" else "none",
        "n": n, "memory": cfg.memory, "seed": seed, "ACC": m["ACC"], "FM": m["FM"], "LA": m["LA"],
    }


def _cell_worker(args):
    cfg, run_id, n, seed = args
    try:
        return run_cell(cfg, run_id, n, seed), None
    except Exception as exc:  # reported per run
        return None, {"error": "runtime", "run_id": run_id, "type": type(exc).__name__, "message": str(exc)}


def run_experiment(cfg: ExperimentConfig) -> tuple[list[dict], dict | None]:
    cells = cfg.cells()
    rows: list[dict] = []
    failure = None
    if cfg.parallel > 1:
        with ProcessPoolExecutor(cfg.parallel) as pool:
            outcomes = list(pool.map(_cell_worker, [(cfg, *c) for c in cells]))
    else:
        benchmark = _load_benchmark(cfg)
        outcomes = []
        for run_id, n, seed in cells:
            try:
                outcomes.append((run_cell(cfg, run_id, n, seed, benchmark), None))
            except Exception as exc:
                outcomes.append((None, {"error": "runtime", "run_id": run_id, "type": type(exc).__name__,
                                        "message": str(exc)}))
                break
    for row, err in outcomes:
        if err is not None:
            failure = failure or err
        else:
            rows.append(row)
    write_csv(Path(cfg.out) / "results.csv", rows)
    return rows, failure


def write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if k in ("ACC", "FM", "LA") else v) for k, v in row.items()})


# --------------------------------------------------------------- plotting
def read_results(path) -> list[dict]:
    """Parse a results CSV; raises ``FormatError`` on a malformed file."""
    text = Path(path).read_text()
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None or list(reader.fieldnames) != CSV_FIELDS:
        raise FormatError(f"results header must be {','.join(CSV_FIELDS)}", 0)
    rows = []
    for i, row in enumerate(reader, start=2):
        if None in row or any(v is None for v in row.values()):
            raise FormatError(f"line {i}: expected {len(CSV_FIELDS)} fields", i)
        try:
            row["n"] = int(row["n"])
            row["seed"] = int(row["seed"])
            for k in ("ACC", "FM", "LA"):
                row[k] = float(row[k])
        except ValueError as exc:
            raise FormatError(f"line {i}: {exc}", i) from None
        rows.append(row)
    return rows


def _group_key(row: dict) -> str:
    return row["run_id"].rsplit("-s", 1)[0]


def plot_results(csv_path, out_dir) -> list[Path]:
    """Render a bar chart of mean ACC per setting and an ACC-vs-n curve.

    Returns the written image paths; an empty list (with a warning) when the
    CSV has no data rows.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_results(csv_path)
    if not rows:
        logger.warning("results file %s has no rows; nothing to plot", csv_path)
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "dualnet"

    groups: dict[str, list[float]] = {}
    for row in rows:
        groups.setdefault(_group_key(row), []).append(row["ACC"])
    names = sorted(groups)
    means = [float(np.mean(groups[k])) for k in names]
    stds = [float(np.std(groups[k])) for k in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), means, yerr=stds, color="#4a7bb7", capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("ACC")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    written = [out / "acc_by_setting.png"]
    fig.savefig(written[0], dpi=100, metadata={"Software": None})
    plt.close(fig)

    by_n: dict[int, list[float]] = {}
    for row in rows:
        by_n.setdefault(row["n"], []).append(row["ACC"])
    if len(by_n) > 1:
        ns = sorted(by_n)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(ns, [np.mean(by_n[n]) for n in ns], yerr=[np.std(by_n[n]) for n in ns], marker="o")
        ax.set_xlabel("SSL iterations n")
        ax.set_ylabel("ACC")
        fig.tight_layout()
        path = out / "acc_vs_n.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


# -------------------------------------------------------------------- main
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train every (setting, seed) cell")
    r.add_argument("--config", help="flat key = value configuration file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for flag in ("dataset", "classes-per-task", "tasks", "protocol", "rho", "learner", "objective", "n", "memory",
                 "seeds", "out", "parallel"):
        r.add_argument(f"--{flag}")
    r.add_argument("--holdout-validation", action="store_const", const="true")
    r.add_argument("--wall-clock", action="store_const", const="true", help="record wall_ms in run logs")
    r.add_argument("--checkpoints", action="store_const", const="true", help="save a checkpoint per run")
    pl = sub.add_parser("plot", help="render figures from a results CSV")
    pl.add_argument("csv")
    pl.add_argument("--out", default=None)
    return p


def _error(record: dict) -> None:
    print(json.dumps(record), file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    if args.command == "plot":
        try:
            paths = plot_results(args.csv, args.out or Path(args.csv).parent)
        except FormatError as exc:
            _error({"error": "format", "file": args.csv, "offset": exc.offset, "message": str(exc)})
            return 2
        except OSError as exc:
            _error({"error": "io", "file": args.csv, "message": str(exc)})
            return 1
        for path in paths:
            print(path)
        return 0

    overrides: dict[str, str] = {}
    try:
        for item in args.set:
            key, sep, value = item.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in ExperimentConfig.keys():
                raise ConfigError(key or item, "unknown key" if sep else "expected KEY=VALUE")
            overrides[key] = value
        for key in ("dataset", "classes_per_task", "tasks", "protocol", "rho", "learner", "objective", "n", "memory",
                    "seeds", "out", "parallel", "holdout_validation", "wall_clock", "checkpoints"):
            value = getattr(args, key)
            if value is not None:
                overrides[key] = value
        cfg = build_config(args.config, overrides)
    except ConfigError as exc:
        _error({"error": "config", "field": exc.field, "message": exc.message})
        return 2

    rows, failure = run_experiment(cfg)
    for row in rows:
        print(f"{row['run_id']}: ACC={row['ACC']:.4f} FM={row['FM']:.4f} LA={row['LA']:.4f}")
    if failure is not None:
        _error(failure)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
