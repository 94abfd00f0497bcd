"""Command-line entry point: config-file driven, reproducible runs.

One JSON config describes a whole run; flags only override top-level
scalars (seed, output directory, worker count). Every run writes its
artifacts under <out_dir>/<run-id>/ where the run-id hashes the resolved
config, so re-running the same config lands in the same place and sweeps
can resume by skipping completed cells.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import sys
from dataclasses import MISSING, dataclass, field, fields, asdict, replace
from pathlib import Path

import numpy as np

from .attribution import (
    ESTIMATORS,
    ProbeConfig,
    granger_oracle,
    write_importance_csv,
    write_importance_json,
)
from .benchmark import (
    BenchmarkResult,
    SyntheticSpec,
    aggregate_sweep,
    generate,
    masking_protocol,
    mge_quality_protocol,
    recall_at_k,
    sweep_single,
    timing_protocol,
    train_model,
    write_benchmark_csv,
    write_sweep_csv,
)
from .granger import evaluate, write_training_log
from .model import AmeConfig, ConfigError, load_model, model_hash, save_model

COMMANDS = ("train", "explain", "benchmark", "sweep", "oracle")

PROTOCOLS = ("masking", "mge_quality", "recall", "timing")

DEFAULT_ALPHAS = [round(0.01 * i, 2) for i in range(11)]  # 0, 0.01, ..., 0.1


class InvariantError(RuntimeError):
    """An output failed its own validity check; the run must not exit 0."""


@dataclass
class RunConfig:
    """Whole-run description; parsed strictly so configs stay replayable."""

    model: AmeConfig = field(default_factory=AmeConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    command: str | None = None
    out_dir: str = "runs"
    seed: int | None = None
    model_path: str | None = None
    estimators: list[str] = field(default_factory=lambda: ["ame"])
    protocols: list[str] = field(default_factory=lambda: ["masking", "recall", "timing"])
    fraction: float = 0.1
    k: int = 1
    n: int = 100
    alphas: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    runs: int = 5
    baseline_value: float = 0.0
    jobs: int = 1
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> None:
        if self.command is not None and self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}; expected one of {sorted(ESTIMATORS)}")
        for name in self.protocols:
            if name not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if not self.alphas:
            raise ConfigError("alphas must be non-empty")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown RunConfig fields: {unknown}")
        kwargs = dict(raw)
        if "model" in kwargs:
            kwargs["model"] = AmeConfig.from_dict(kwargs["model"])
        if "data" in kwargs:
            kwargs["data"] = SyntheticSpec.from_dict(kwargs["data"])
        if "probe" in kwargs:
            probe_raw = kwargs["probe"]
            probe_known = {f.name for f in fields(ProbeConfig)}
            probe_unknown = sorted(set(probe_raw) - probe_known)
            if probe_unknown:
                raise ConfigError(f"unknown probe fields: {probe_unknown}")
            kwargs["probe"] = ProbeConfig(**probe_raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        return out


def resolve_config(cfg: RunConfig) -> RunConfig:
    """Apply the top-level seed override to the nested seeds."""
    if cfg.seed is not None:
        cfg.model.seed = cfg.seed
        cfg.data.seed = cfg.seed
        cfg.probe.seed = cfg.seed
    if cfg.model.task != cfg.data.task:
        raise ConfigError(
            f"model task {cfg.model.task!r} does not match data task {cfg.data.task!r}")
    if cfg.model.n_features != cfg.data.total_features:
        raise ConfigError(
            f"model partition covers {cfg.model.n_features} features but the dataset "
            f"has {cfg.data.total_features}")
    return cfg


def run_id(cfg: RunConfig) -> str:
    """Identity of the run: the settings, not the command or where artifacts
    land, so train/explain/benchmark over one config share a directory."""
    payload = cfg.to_dict()
    for transient in ("out_dir", "jobs", "command"):
        payload.pop(transient)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _run_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir) / run_id(cfg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config_echo(cfg: RunConfig, run_dir: Path) -> None:
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_simplex_rows(per_sample: np.ndarray, what: str) -> None:
    if np.any(per_sample < 0) or np.any(np.abs(per_sample.sum(axis=1) - 1.0) > 1e-6):
        raise InvariantError(f"{what}: rows are not valid distributions")


def informative_groups(partition: list[list[int]], informative: list[int]) -> set[int]:
    """Group indices that contain at least one truly informative feature."""
    truth = set(informative)
    return {gi for gi, group in enumerate(partition) if truth & set(group)}


# -- commands -----------------------------------------------------------------


def run_train(cfg: RunConfig) -> int:
    run_dir = _run_dir(cfg)
    splits = generate(cfg.data)
    model, rows = train_model(cfg.model, splits)
    test_metrics = evaluate(model, splits.test.x, splits.test.y)

    _write_config_echo(cfg, run_dir)
    save_model(model, run_dir / "model.json")
    write_training_log(rows, run_dir / "training_log.csv")
    print(f"run {run_id(cfg)}: trained {len(rows)} logged epochs "
          f"(alpha={cfg.model.alpha}, seed={cfg.model.seed})")
    print(f"test main_loss={test_metrics['main_loss']:.6f} "
          f"mge={test_metrics['mge']:.6f} aux_loss_mean={test_metrics['aux_loss_mean']:.6f}")
    print(f"artifacts in {run_dir}")
    return 0


def _load_model_for(cfg: RunConfig):
    if cfg.model_path is None:
        raise ConfigError("model_path: required for this command (run 'train' first)")
    if not Path(cfg.model_path).exists():
        raise ConfigError(f"model_path: {cfg.model_path} does not exist")
    model = load_model(cfg.model_path)
    if model.config.feature_partition != cfg.model.feature_partition:
        raise ConfigError(
            "model_path: stored feature partition "
            f"{model.config.feature_partition} != configured {cfg.model.feature_partition}")
    return model


def run_explain(cfg: RunConfig) -> int:
    run_dir = _run_dir(cfg)
    model = _load_model_for(cfg)
    splits = generate(cfg.data)
    reports = []
    for name in cfg.estimators:
        if name == "occlusion":
            report = ESTIMATORS[name](model, splits.test.x, baseline_value=cfg.baseline_value)
        else:
            report = ESTIMATORS[name](model, splits.test.x)
        _check_simplex_rows(report.per_sample, f"estimator {name}")
        reports.append(report)
        print(f"{name}: {report.n_samples} samples, {report.forwards} forwards, "
              f"{report.backwards} backwards, {report.seconds:.3f}s")
    _write_config_echo(cfg, run_dir)
    write_importance_csv(reports, run_dir / "importance.csv")
    write_importance_json(reports, run_dir / "importance.json")
    print(f"artifacts in {run_dir}")
    return 0


def run_benchmark(cfg: RunConfig) -> int:
    run_dir = _run_dir(cfg)
    splits = generate(cfg.data)
    if cfg.model_path is not None:
        model = _load_model_for(cfg)
    else:
        model, _ = train_model(cfg.model, splits)
    mh = model_hash(model)
    result = BenchmarkResult(rows=[], config_echo=cfg.to_dict(), seed=cfg.model.seed)

    for protocol in cfg.protocols:
        if protocol == "masking":
            report = ESTIMATORS["ame"](model, splits.test.x[:cfg.n])
            outcome = masking_protocol(model, report, splits.test.x, cfg.fraction,
                                       cfg.baseline_value, n=cfg.n, seed=cfg.model.seed)
            for key in ("informed_drop", "random_drop", "p_value", "n_masked"):
                result.add("masking", key, outcome[key], mh)
        elif protocol == "mge_quality":
            variants = _mge_quality_variants(cfg, splits)
            outcome = mge_quality_protocol(variants, splits.test, fraction=cfg.fraction,
                                           baseline_value=cfg.baseline_value,
                                           n=cfg.n, seed=cfg.model.seed)
            for row in outcome["rows"]:
                result.add("mge_quality", f"{row['model']}.test_mge", row["test_mge"],
                           row["model_hash"])
                result.add("mge_quality", f"{row['model']}.logodds_drop", row["logodds_drop"],
                           row["model_hash"])
            result.add("mge_quality", "spearman", outcome["spearman"], mh)
        elif protocol == "recall":
            truth = informative_groups(cfg.model.feature_partition, cfg.data.informative)
            for name in cfg.estimators:
                if name == "occlusion":
                    report = ESTIMATORS[name](model, splits.test.x, baseline_value=cfg.baseline_value)
                else:
                    report = ESTIMATORS[name](model, splits.test.x)
                result.add("recall", f"{name}.recall_at_{cfg.k}",
                           recall_at_k(report, truth, cfg.k), mh)
        elif protocol == "timing":
            for row in timing_protocol(model, splits.test.x[:cfg.n], cfg.estimators):
                for key in ("seconds", "forwards", "backwards", "ratio_vs_ame"):
                    result.add("timing", f"{row['estimator']}.{key}", row[key], mh)

    _write_config_echo(cfg, run_dir)
    write_benchmark_csv(result, run_dir / "benchmark.csv")
    for row in result.rows:
        print(f"{row['protocol']}.{row['metric']} = {row['value']}")
    print(f"artifacts in {run_dir}")
    return 0


def _mge_quality_variants(cfg: RunConfig, splits):
    """Three differently trained models: converged with the causal objective,
    prematurely stopped with a weak objective, and without it entirely."""
    short = max(1, cfg.model.epochs // 10)
    recipe = [("alpha_0.1_converged", 0.1, None),
              ("alpha_0.01_early", 0.01, short),
              ("alpha_0_baseline", 0.0, None)]
    variants = []
    for name, alpha, epochs in recipe:
        model, _ = train_model(replace(cfg.model, alpha=alpha), splits, epochs=epochs)
        variants.append((name, model))
    return variants


def _sweep_cell_path(run_dir: Path, alpha: float, run: int) -> Path:
    return run_dir / "sweep_cells" / f"alpha_{alpha:g}_run_{run}.json"


def _sweep_cell(args) -> dict:
    model_cfg_raw, spec_raw, alpha, run = args
    row = sweep_single(AmeConfig.from_dict(model_cfg_raw),
                       SyntheticSpec.from_dict(spec_raw), alpha, run)
    return row


def run_sweep(cfg: RunConfig) -> int:
    run_dir = _run_dir(cfg)
    (run_dir / "sweep_cells").mkdir(exist_ok=True)
    cells = [(alpha, run) for alpha in cfg.alphas for run in range(cfg.runs)]
    pending = [(a, r) for a, r in cells if not _sweep_cell_path(run_dir, a, r).exists()]
    print(f"sweep: {len(cells)} cells, {len(cells) - len(pending)} already complete")

    jobs = [(cfg.model.to_dict(), cfg.data.to_dict(), a, r) for a, r in pending]
    if cfg.jobs > 1 and jobs:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            fresh = list(pool.map(_sweep_cell, jobs))
    else:
        fresh = [_sweep_cell(job) for job in jobs]
    for (alpha, run), row in zip(pending, fresh):
        with open(_sweep_cell_path(run_dir, alpha, run), "w", encoding="utf-8") as fh:
            json.dump(row, fh, sort_keys=True)
            fh.write("\n")

    run_rows = []
    for alpha, run in cells:
        with open(_sweep_cell_path(run_dir, alpha, run), "r", encoding="utf-8") as fh:
            run_rows.append(json.load(fh))
    agg_rows = aggregate_sweep(run_rows)
    _write_config_echo(cfg, run_dir)
    write_sweep_csv(run_rows, agg_rows, run_dir / "sweep.csv")
    for row in agg_rows:
        print(f"alpha={row['alpha']}: metric {row['metric_mean']:.6f}±{row['metric_sd']:.6f} "
              f"mge {row['mge_mean']:.6f}±{row['mge_sd']:.6f}")
    print(f"artifacts in {run_dir}")
    return 0


def run_oracle(cfg: RunConfig) -> int:
    run_dir = _run_dir(cfg)
    splits = generate(cfg.data)
    probe = cfg.probe
    probe.task = cfg.data.task
    omega = granger_oracle((splits.train.x, splits.train.y),
                           (splits.test.x, splits.test.y),
                           cfg.model.feature_partition, probe)
    _check_simplex_rows(omega, "oracle targets")
    _write_config_echo(cfg, run_dir)
    p = omega.shape[1]
    with open(run_dir / "oracle.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"group_{i + 1}" for i in range(p)])
        for s in range(omega.shape[0]):
            writer.writerow([s] + [float(v) for v in omega[s]])
    print(f"oracle targets for {omega.shape[0]} held-out samples "
          f"(mean: {np.array2string(omega.mean(axis=0), precision=4)})")
    print(f"artifacts in {run_dir}")
    return 0


RUNNERS = {
    "train": run_train,
    "explain": run_explain,
    "benchmark": run_benchmark,
    "sweep": run_sweep,
    "oracle": run_oracle,
}


# -- argument parsing -----------------------------------------------------------


def _field_reference() -> str:
    lines = ["config file reference (JSON; unknown fields are rejected):"]
    for title, cls in (("top-level", RunConfig), ("model.*", AmeConfig),
                       ("data.*", SyntheticSpec), ("probe.*", ProbeConfig)):
        lines.append(f"\n  [{title}]")
        for f in fields(cls):
            if f.name in ("model", "data", "probe"):
                continue
            if f.default_factory is not MISSING:
                default = f.default_factory()
            else:
                default = f.default
            lines.append(f"    {f.name} (default: {default!r})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ame-lab",
        description="Train, explain, and benchmark attentive mixtures of experts.",
        epilog=_field_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} command from a config file")
        cmd.add_argument("--config", required=True, help="path to the JSON run config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed (model, data, and probe)")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--jobs", type=int, default=None,
                         help="parallel workers for sweep cells")
    return parser


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return RunConfig.from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.command is not None and cfg.command != args.command:
            raise ConfigError(
                f"command: config says {cfg.command!r} but {args.command!r} was invoked")
        cfg.command = args.command
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.jobs is not None:
            cfg.jobs = args.jobs
        cfg = resolve_config(cfg)
        return RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvariantError, FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
