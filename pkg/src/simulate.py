"""
Command-line entry point for the power-aware serving pipeline.

    python src/simulate.py profile  --models Qwen1.5-MoE Mixtral-8x7B
    python src/simulate.py train    --dataset runs/profile/*.csv
    python src/simulate.py simulate --scenario scenarios/single_node_qwen.json --suite
    python src/simulate.py pareto   --profile Qwen1.5-MoE
    python src/simulate.py report   --results runs/simulate/single-node-qwen
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import analysis
import config
from cluster_sim import load_scenario, run, run_baseline_suite, write_result
from controller import POLICIES
from errors import EXIT_OK, BackendError, ConfigError, DataError, ServingError, exit_code_for
from logger import Color, RunLogger
from perf_model import load_gpu_spec, load_registry
from predictor import (
    TARGETS,
    Hyperparams,
    evaluate_mape,
    evaluate_mape_by_model,
    feature_importance,
    load_model,
    save_model,
    train,
)
from profiler import (
    SimulatedBackend,
    fit_system_power,
    load_grid,
    merge_datasets,
    read_dataset,
    run_sweep,
    split_holdout,
    write_dataset,
)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Reproducibility record written next to every command's outputs."""

    command: str
    config_hash: str
    seeds: dict[str, int]
    profile_versions: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = config.TOOL_VERSION

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def output_root() -> Path:
    """Where commands write when no --out is given; SERVING_OUTPUT_ROOT overrides."""
    return Path(os.getenv("SERVING_OUTPUT_ROOT", config.OUTPUT_ROOT))


def hash_inputs(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def profile_files(directory: Path = config.PROFILE_DIR) -> dict[str, Path]:
    """Shipped profile files keyed by profile name."""
    files = {}
    for path in sorted(Path(directory).glob("*.json")):
        with open(path) as f:
            files[json.load(f)["name"]] = path
    return files


def profile_versions(names: Sequence[str]) -> dict[str, str]:
    files = profile_files()
    return {
        name: hashlib.sha256(files[name].read_bytes()).hexdigest()[:12]
        for name in sorted(set(names))
        if name in files
    }


def _relative(paths: Sequence[Path], out_dir: Path) -> list[str]:
    return sorted(str(Path(p).relative_to(out_dir)) for p in paths)


def _out_dir(args, *default_parts: str) -> Path:
    out_dir = Path(args.out) if args.out else output_root().joinpath(*default_parts)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _make_logger(args, out_dir: Path) -> RunLogger:
    return RunLogger(log_to_file=not args.no_log_file, log_dir=out_dir, quiet=args.quiet)


def cmd_profile(args, logger: RunLogger, out_dir: Path) -> RunManifest:
    """Sweep the grid for each requested profile on the simulated backend."""
    spec = load_gpu_spec(config.GPU_SPEC_FILE)
    registry = load_registry(config.PROFILE_DIR, spec)
    models = args.models or list(registry)
    unknown = [m for m in models if m not in registry]
    if unknown:
        raise ConfigError(f"unknown profile(s) {unknown}; available: {', '.join(registry)}")
    grid = load_grid(args.grid).validate(spec)
    backend = SimulatedBackend(spec, sigma=args.sigma)
    files = profile_files()

    logger.header(f"PROFILING {len(models)} MODEL(S) OVER {grid.size} GRID POINTS", Color.BRIGHT_MAGENTA)
    start_time = time.time()
    written, datasets = [], []
    for model in models:
        dataset = run_sweep(
            grid,
            registry[model],
            backend,
            noise_seed=args.seed,
            max_workers=args.max_workers,
            logger=logger,
        )
        stem = files[model].stem if model in files else model
        written.extend(write_dataset(dataset, out_dir / f"{stem}.csv"))
        datasets.append(dataset)
        if not dataset.complete:
            raise BackendError(f"sweep of {model} stopped early; partial dataset written")

    fit = fit_system_power(merge_datasets(datasets).records)
    logger.stats(
        {
            "models": len(models),
            "records": sum(len(d) for d in datasets),
            "skipped": sum(d.skipped for d in datasets),
            "outliers": sum(d.outliers for d in datasets),
            "system power fit": {
                "alpha": fit.coeffs.alpha,
                "beta": fit.coeffs.beta,
                "r_squared": fit.r_squared,
                "mae_watts": fit.mae,
            },
            "elapsed_time": time.time() - start_time,
        },
        title="PROFILING SUMMARY",
    )
    return RunManifest(
        command="profile",
        config_hash=hash_inputs({"grid": grid.to_dict(), "models": models, "sigma": args.sigma}),
        seeds={"noise": args.seed},
        profile_versions=profile_versions(models),
        outputs=_relative(written, out_dir),
    )


def load_hyperparams(args) -> Hyperparams:
    data: dict[str, Any] = {}
    if args.hyperparams:
        try:
            with open(args.hyperparams) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Cannot read hyperparameter file {args.hyperparams}: {exc}") from exc
    for key in ("n_trees", "max_depth", "min_leaf"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    return Hyperparams.from_dict(data)


def cmd_train(args, logger: RunLogger, out_dir: Path) -> RunManifest:
    """Fit the ensemble and report held-out MAPE and feature importance."""
    hyperparams = load_hyperparams(args)
    dataset = merge_datasets([read_dataset(path) for path in args.dataset])
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    train_records, heldout = split_holdout(dataset.records, args.holdout, seed=args.seed)

    logger.header(f"TRAINING ON {len(train_records)} RECORDS", Color.BRIGHT_MAGENTA)
    model = train(train_records, hyperparams, seed=args.seed, targets=TARGETS)
    model_path = save_model(model, out_dir / "model.json")

    tput_mape, power_mape = evaluate_mape(model, heldout)
    ranking = feature_importance(model, "efficiency")
    report = {
        "pooled": {"throughput_mape": tput_mape, "power_mape": power_mape},
        "per_model": {
            model_id: {"throughput_mape": t, "power_mape": p}
            for model_id, (t, p) in evaluate_mape_by_model(model, heldout).items()
        },
        "feature_importance": dict(ranking),
        "train_records": len(train_records),
        "heldout_records": len(heldout),
    }
    report_path = out_dir / "mape.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

    logger.stats(
        {
            "throughput MAPE": tput_mape,
            "power MAPE": power_mape,
            "top features (efficiency)": {name: score for name, score in ranking[:3]},
        },
        title="PREDICTOR ACCURACY",
    )
    return RunManifest(
        command="train",
        config_hash=hash_inputs(
            {
                "datasets": [hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in args.dataset],
                "hyperparams": hyperparams.to_dict(),
                "holdout": args.holdout,
            }
        ),
        seeds={"bootstrap": args.seed, "holdout": args.seed},
        profile_versions=profile_versions(dataset.models),
        outputs=_relative([model_path, report_path], out_dir),
    )


def _write_run(result, out_dir: Path, manifest: RunManifest, logger: RunLogger) -> dict[str, Any]:
    summary = analysis.summary_dict(result)
    written = write_result(result, out_dir, summary)
    manifest.outputs = _relative(written, out_dir)
    manifest.write(out_dir)
    logger.stats(
        {
            "policy": result.policy,
            "tokens_per_joule": summary["efficiency"],
            "qos_violation_rate": summary["cluster"]["qos_violation_rate"],
            **{label: {"violation_rate": node["qos_violation_rate"]} for label, node in summary["nodes"].items()},
        },
        title=f"{result.scenario.upper()} / {result.policy.upper()}",
    )
    return summary


def cmd_simulate(args, logger: RunLogger, out_dir: Path) -> RunManifest:
    """Run one policy, or the whole baseline suite, over a scenario."""
    scenario = load_scenario(args.scenario)
    predictor = load_model(args.model) if args.model else None
    spec = load_gpu_spec(config.GPU_SPEC_FILE)
    registry = load_registry(config.PROFILE_DIR, spec)
    models = [node.model for node in scenario.nodes]

    def manifest_for(policy: str) -> RunManifest:
        return RunManifest(
            command=f"simulate --policy {policy}",
            config_hash=scenario.config_hash(),
            seeds={"scenario": scenario.seed},
            profile_versions=profile_versions(models),
        )

    if not args.suite:
        policy = args.policy or scenario.policy
        logger.header(f"SIMULATING {scenario.name} WITH POLICY {policy}", Color.BRIGHT_MAGENTA)
        result = run(scenario, predictor, registry, spec, policy, logger)
        manifest = manifest_for(policy)
        _write_run(result, out_dir, manifest, logger)
        return manifest

    logger.header(f"BASELINE SUITE ON {scenario.name}", Color.BRIGHT_MAGENTA)
    results = run_baseline_suite(
        scenario, predictor, registry, spec, POLICIES, max_workers=args.max_workers, logger=logger
    )
    written = []
    summaries = {}
    for policy, result in results.items():
        policy_dir = out_dir / policy
        policy_dir.mkdir(parents=True, exist_ok=True)
        summary = _write_run(result, policy_dir, manifest_for(policy), logger)
        summaries[policy] = analysis.MetricsSummary.from_dict(summary["cluster"])
        written.append(policy_dir / "summary.json")

    rows = analysis.compare_policies(summaries)
    report_path = out_dir / "comparison.md"
    report_path.write_text(analysis.render_markdown(rows, title=f"{scenario.name}: policy comparison"))
    written.append(report_path)
    logger.print(report_path.read_text(), Color.BRIGHT_WHITE)
    return RunManifest(
        command="simulate --suite",
        config_hash=scenario.config_hash(),
        seeds={"scenario": scenario.seed},
        profile_versions=profile_versions(models),
        outputs=_relative(written, out_dir),
    )


def cmd_pareto(args, logger: RunLogger, out_dir: Path) -> RunManifest:
    """Frontier CSV per regime, pairwise dominance verdicts and the calibration checks."""
    spec = load_gpu_spec(config.GPU_SPEC_FILE)
    registry = load_registry(config.PROFILE_DIR, spec)
    if args.profile not in registry:
        raise ConfigError(f"Unknown profile '{args.profile}'. Available: {', '.join(registry)}")
    profile = registry[args.profile]
    regimes = args.regimes or list(analysis.REGIMES)
    for name in regimes:
        analysis.get_regime(name)

    logger.header(f"FRONTIERS FOR {profile.name}", Color.BRIGHT_MAGENTA)
    frontiers = {name: analysis.regime_frontier(name, profile, spec) for name in regimes}
    written = [analysis.write_frontier(f, out_dir / f"{name}.csv") for name, f in frontiers.items()]

    verdicts = {}
    for a in regimes:
        for b in regimes:
            if a == b:
                continue
            ok, witnesses = analysis.verify_dominance(frontiers[a], frontiers[b])
            verdicts[f"{a} >= {b}"] = {
                "dominates": ok,
                "witnesses": [w.point.label for w in witnesses],
            }
    checks = [
        asdict(check)
        for check in analysis.acceptance_checks(registry, spec)
        if check.subject == profile.name
    ]
    verdict_path = out_dir / "dominance.json"
    with open(verdict_path, "w") as f:
        json.dump(
            {
                "profile": profile.name,
                "peak_efficiency": {n: analysis.peak_efficiency(fr) for n, fr in frontiers.items()},
                "dominance": verdicts,
                "checks": checks,
                "scaling": analysis.scaling_study(profile, spec),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    written.append(verdict_path)

    for check in checks:
        color = Color.GREEN if check["passed"] else Color.RED
        logger.print(
            f"  {check['name']:<20} {check['value']:.4f} (expected {check['expected']})", color
        )
    return RunManifest(
        command="pareto",
        config_hash=hash_inputs({"profile": profile.name, "regimes": regimes}),
        seeds={},
        profile_versions=profile_versions([profile.name]),
        outputs=_relative(written, out_dir),
    )


def _summary_files(paths: Sequence[str]) -> list[Path]:
    found = []
    for raw in paths:
        path = Path(raw)
        if (path / "summary.json").exists():
            found.append(path / "summary.json")
        else:
            found.extend(sorted(path.glob("*/summary.json")))
    if not found:
        raise DataError(f"no summary.json found under {list(paths)}")
    return found


def cmd_report(args, logger: RunLogger, out_dir: Path) -> RunManifest:
    """Markdown comparison table over finished runs."""
    summaries = {}
    for path in _summary_files(args.results):
        with open(path) as f:
            data = json.load(f)
        summaries[data["policy"]] = analysis.MetricsSummary.from_dict(data["cluster"])
    rows = analysis.compare_policies(summaries)
    markdown = analysis.render_markdown(rows)
    report_path = out_dir / "report.md"
    report_path.write_text(markdown)
    json_path = out_dir / "report.json"
    with open(json_path, "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.print(markdown, Color.BRIGHT_WHITE)
    return RunManifest(
        command="report",
        config_hash=hash_inputs(sorted(summaries)),
        seeds={},
        outputs=_relative([report_path, json_path], out_dir),
    )


COMMANDS = {
    "profile": (cmd_profile, ("profile",)),
    "train": (cmd_train, ("train",)),
    "simulate": (cmd_simulate, None),
    "pareto": (cmd_pareto, None),
    "report": (cmd_report, ("report",)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Power-aware LLM serving: profile, train, simulate, analyze")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"Output directory (default: under $SERVING_OUTPUT_ROOT or '{config.OUTPUT_ROOT}')")
    common.add_argument("--quiet", action="store_true", help="Suppress console output")
    common.add_argument("--no-log-file", action="store_true", help="Do not write a run log file")
    common.add_argument(
        "--max-workers",
        type=int,
        default=1,
        help="Worker threads for sweeps and baseline suites (default: 1)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", parents=[common], help="Sweep operating points on the simulated backend")
    p.add_argument("--grid", help="Sweep grid JSON (default: the full knob grid)")
    p.add_argument("--models", nargs="+", help="Profile names (default: every shipped profile)")
    p.add_argument("--seed", type=int, default=config.RANDOM_SEED, help="Measurement noise seed")
    p.add_argument(
        "--sigma",
        type=float,
        default=config.NOISE_SIGMA,
        help=f"Relative measurement noise (default: {config.NOISE_SIGMA})",
    )

    p = sub.add_parser("train", parents=[common], help="Train the throughput/power predictor")
    p.add_argument("--dataset", nargs="+", required=True, help="Profiling CSV files")
    p.add_argument("--hyperparams", help="Hyperparameter JSON (n_trees, max_depth, min_leaf)")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--min-leaf", dest="min_leaf", type=int)
    p.add_argument("--holdout", type=float, default=config.HOLDOUT_FRACTION, help="Held-out fraction")
    p.add_argument("--seed", type=int, default=config.RANDOM_SEED, help="Bootstrap and split seed")

    p = sub.add_parser("simulate", parents=[common], help="Run a scenario")
    p.add_argument("--scenario", required=True, help="Scenario JSON file")
    p.add_argument("--policy", choices=POLICIES, help="Override the scenario's policy")
    p.add_argument("--suite", action="store_true", help="Run every policy on the same arrivals")
    p.add_argument("--model", help="Trained predictor file (default: profile and train in-process)")

    p = sub.add_parser("pareto", parents=[common], help="Frontiers and dominance for one profile")
    p.add_argument("--profile", required=True, help="Profile name")
    p.add_argument("--regimes", nargs="+", help=f"Regime presets (default: {', '.join(analysis.REGIMES)})")

    p = sub.add_parser("report", parents=[common], help="Compare finished runs")
    p.add_argument("--results", nargs="+", required=True, help="Run directories or suite roots")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler, default_parts = COMMANDS[args.command]
    if default_parts is None:
        if args.command == "simulate":
            default_parts = ("simulate", Path(args.scenario).stem)
        else:
            default_parts = ("pareto", args.profile.replace("/", "_"))

    out_dir = None
    logger = None
    try:
        out_dir = _out_dir(args, *default_parts)
        logger = _make_logger(args, out_dir)
        handler(args, logger, out_dir).write(out_dir)
        logger.print(f"Outputs written to {out_dir}", Color.GREEN, bold=True)
        return EXIT_OK
    except ServingError as e:
        if logger is None:
            logger = RunLogger(log_to_file=False, quiet=args.quiet)
        logger.error(f"{type(e).__name__}: {e}")
        return exit_code_for(e)
    finally:
        if logger is not None:
            logger.close()


if __name__ == "__main__":
    sys.exit(main())
