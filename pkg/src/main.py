"""
linprobit command-line interface

Subcommands:
    sweep     synthetic SNR sweeps of estimator MSE
    bench     cross-validated ACC/AUC on real datasets
    estimate  fit estimators to a design matrix and observations read from CSV
    verify    run the self-verification property suite

Exit codes: 0 success, 1 partial dataset failure, 2 configuration error,
3 runtime failure, 4 verification failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from analysis import snr_sweep
from bench import (
    CvPlan,
    Dataset,
    IngestionSpec,
    check_catalog_shape,
    load_catalog,
    load_dataset,
    run_benchmark,
)
from error_handling import (
    ConfigurationError,
    DataLoadError,
    ErrorHandler,
    EstimatorUnavailableError,
    LinProbitError,
    VerificationError,
    configure_logging,
    handle_error,
)
from estimators import EstimatorId, estimator_availability, fit_estimator
from model_core import ObservationVector, ProbitProblem, SyntheticConfig, trial_stream
from reporting import (
    FORMATS,
    bench_table,
    generate_markdown_table,
    sweep_table,
    write_json_document,
    write_results,
)
from run_config import CONFIG_DIR, RunConfig, full_scale, load_run_config
from verification import (
    PROPERTIES,
    VerifyContext,
    outcome_table,
    raise_on_failure,
    run_verification,
    sabotage_scale,
)

logger = logging.getLogger("linprobit.cli")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _configurations(text: str) -> List[List[int]]:
    """Parse "10x5,50x20" into [[10, 5], [50, 20]]."""
    try:
        pairs = [item.lower().split("x") for item in text.split(",") if item.strip()]
        return [[int(m), int(n)] for m, n in pairs]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MxN pairs like 10x5,50x20, got '{text}'")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="YAML file overriding config/defaults.yaml")
    parser.add_argument("--seed", type=int, help="Root random seed")
    parser.add_argument("--threads", type=int, help="Worker threads")
    parser.add_argument("--output", type=str, help="Output file ('-' or omitted: stdout)")
    parser.add_argument("--format", choices=FORMATS, help="Output format")
    parser.add_argument("--log-level", type=str, help="Logging level (default from env)")


def _add_solver(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gibbs-samples", type=int, help="Gibbs samples kept")
    parser.add_argument("--gibbs-burn-in", type=int, help="Gibbs burn-in sweeps")
    parser.add_argument("--max-iter", type=int, help="Iteration cap of CG and gradient solvers")
    parser.add_argument(
        "--full-scale",
        action="store_true",
        help="Use the full Gibbs chain (50000 samples after 20000 burn-in)",
    )


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with all subcommands."""
    parser = argparse.ArgumentParser(
        prog="linprobit",
        description="Linearized probit regression: estimators, MSE sweeps and benchmarks",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sweep = commands.add_parser("sweep", help="Synthetic SNR sweep of estimator MSE")
    _add_common(sweep)
    _add_solver(sweep)
    sweep.add_argument("--trials", type=int, help="Trials per SNR point")
    sweep.add_argument("--snr-grid", type=_float_list, help="Comma-separated SNR values in dB")
    sweep.add_argument("--estimators", type=str, help="Comma-separated estimator ids")
    sweep.add_argument("--configurations", type=_configurations, help="MxN pairs, e.g. 50x5")
    sweep.add_argument("--smoothing", type=float, help="Smoothing sigma (0: sign model)")
    sweep.add_argument("--prior-correlation", type=float, help="AR(1) prior correlation")
    sweep.add_argument("--sigma-x-sq", type=float, help="Prior variance")
    sweep.add_argument("--timing", action="store_true", help="Add mean elapsed_s column")

    bench = commands.add_parser("bench", help="Cross-validated ACC/AUC on datasets")
    _add_common(bench)
    _add_solver(bench)
    bench.add_argument(
        "--dataset", action="append", default=[], help="Catalog dataset name (repeatable)"
    )
    bench.add_argument(
        "--file", action="append", default=[], help="CSV dataset path (repeatable, needs --spec)"
    )
    bench.add_argument("--spec", type=str, help="Ingestion spec as JSON text or a JSON file")
    bench.add_argument("--data-dir", type=str, help="Directory holding catalog datasets")
    bench.add_argument("--estimators", type=str, help="Comma-separated estimator ids")
    bench.add_argument("--folds", type=int, help="Cross-validation folds")
    bench.add_argument("--partitions", type=int, help="Random partitions")
    bench.add_argument("--sigma-grid", type=_float_list, help="Comma-separated sigma_x^2 grid")

    estimate = commands.add_parser("estimate", help="Fit estimators to data from CSV files")
    _add_common(estimate)
    _add_solver(estimate)
    estimate.add_argument("--design", type=str, required=True, help="Headerless CSV, M x N")
    estimate.add_argument(
        "--observations", type=str, required=True, help="Headerless CSV, one column of M values"
    )
    estimate.add_argument("--prior-variance", type=float, default=1.0, help="sigma_x^2")
    estimate.add_argument("--noise-variance", type=float, default=1.0, help="sigma_w^2")
    estimate.add_argument("--smoothing", type=float, default=0.0, help="Smoothing sigma")
    estimate.add_argument("--estimators", type=str, default="lmmse", help="Estimator ids")
    estimate.add_argument("--timing", action="store_true", help="Report elapsed_s")

    verify = commands.add_parser("verify", help="Run the self-verification suite")
    _add_common(verify)
    verify.add_argument("--trials", type=int, help="Monte-Carlo trials per check")
    verify.add_argument("--sabotage", type=str, help="Inject a known defect (e-matrix-scale)")
    verify.add_argument(
        "--only",
        type=str,
        help=f"Comma-separated subset of: {', '.join(p[0] for p in PROPERTIES)}",
    )
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Apply CLI flags over defaults, the --config file and the environment."""
    config = load_run_config(args.config)
    config = config.with_overrides("runtime", seed=args.seed, threads=args.threads)
    config = config.with_overrides("output", format=args.format)
    if args.output is not None:
        config = config.with_overrides("output", path=args.output)

    if hasattr(args, "gibbs_samples"):
        if args.full_scale:
            config = replace(config, solver=full_scale(config.solver))
        config = config.with_overrides(
            "solver",
            gibbs_samples=args.gibbs_samples,
            gibbs_burn_in=args.gibbs_burn_in,
            max_iter=args.max_iter,
        )

    if args.command == "sweep":
        config = config.with_overrides(
            "synthetic",
            trials=args.trials,
            snr_grid_db=args.snr_grid,
            estimators=args.estimators,
            configurations=args.configurations,
            smoothing=args.smoothing,
            prior_correlation=args.prior_correlation,
            sigma_x_sq=args.sigma_x_sq,
        )
    elif args.command == "bench":
        config = config.with_overrides(
            "bench",
            estimators=args.estimators,
            folds=args.folds,
            partitions=args.partitions,
            sigma_x_grid=args.sigma_grid,
            data_dir=args.data_dir,
        )
    elif args.command == "verify":
        config = config.with_overrides("verify", trials=args.trials)
    return config


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    settings = config.synthetic
    results = []
    for m, n in settings.configurations:
        base = SyntheticConfig(
            m=m,
            n=n,
            sigma_x_sq=settings.sigma_x_sq,
            seed=config.runtime.seed,
            smoothing=settings.smoothing,
            prior_correlation=settings.prior_correlation,
        )
        results.extend(
            snr_sweep(
                base,
                settings.snr_grid_db,
                settings.estimators,
                settings.trials,
                cfg=config.solver,
                threads=config.runtime.threads,
                timing=args.timing,
            )
        )
    table = sweep_table(results, timing=args.timing)
    write_results(table, config.output.path, config.output.format)
    return EXIT_OK


def _read_spec(text: str) -> IngestionSpec:
    source = Path(text)
    try:
        raw = json.loads(source.read_text(encoding="utf-8") if source.is_file() else text)
    except (json.JSONDecodeError, OSError) as e:
        raise ConfigurationError(f"Invalid ingestion spec: {e}", details={"spec": text})
    if not isinstance(raw, dict):
        raise ConfigurationError("Ingestion spec must be a JSON object")
    return IngestionSpec.from_dict(raw)


def _project_path(path: str) -> Path:
    """Resolve a relative path against the working directory, else the project root."""
    candidate = Path(path)
    if candidate.is_absolute() or candidate.exists():
        return candidate
    return CONFIG_DIR.parent / candidate


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    settings = config.bench
    if not args.dataset and not args.file:
        raise ConfigurationError("bench needs at least one --dataset or --file")
    if args.file and not args.spec:
        raise ConfigurationError("--file datasets need an ingestion --spec")

    catalog = load_catalog(_project_path(settings.catalog)) if args.dataset else {}
    jobs = []
    for name in args.dataset:
        if name not in catalog:
            raise ConfigurationError(
                f"Unknown catalog dataset: {name} (known: {', '.join(sorted(catalog))})"
            )
        entry = catalog[name]
        jobs.append((name, _project_path(settings.data_dir) / entry.file, entry.spec, entry))
    if args.file:
        spec = _read_spec(args.spec)
        jobs.extend((Path(f).stem, Path(f), spec, None) for f in args.file)

    plan = CvPlan(folds=settings.folds, partitions=settings.partitions, seed=config.runtime.seed)
    results = []
    failed = []
    for name, path, spec, entry in jobs:
        with ErrorHandler(context={"dataset": name, "path": str(path)}) as handler:
            dataset: Dataset = load_dataset(path, spec, name=name)
            if entry is not None:
                check_catalog_shape(dataset, entry)
            results.extend(
                run_benchmark(
                    dataset,
                    settings.estimators,
                    plan,
                    settings.sigma_x_grid,
                    cfg=config.solver,
                    threads=config.runtime.threads,
                )
            )
        if handler.has_error:
            failed.append(name)
            print(f"bench: dataset '{name}' failed: {handler.error}", file=sys.stderr)
            if not isinstance(handler.error, DataLoadError):
                logger.error(f"Dataset '{name}' failed during benchmarking")

    fmt = config.output.format
    table = bench_table(results, catalog=catalog if fmt == "markdown" else None)
    write_results(table, config.output.path, fmt)
    return EXIT_PARTIAL if failed else EXIT_OK


def _read_matrix(path: str, label: str) -> np.ndarray:
    try:
        frame = pd.read_csv(path, header=None)
    except FileNotFoundError:
        raise DataLoadError(f"{label} file not found: {path}", details={"path": path})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataLoadError(f"Could not parse {label} file {path}: {e}", details={"path": path})
    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    if np.isnan(values).any():
        raise DataLoadError(f"{label} file {path} has missing or non-numeric cells")
    return values


def _json_ready(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    return value


def cmd_estimate(args: argparse.Namespace, config: RunConfig) -> int:
    design = _read_matrix(args.design, "design")
    values = _read_matrix(args.observations, "observations").reshape(-1)
    problem = ProbitProblem.isotropic(
        design, args.prior_variance, args.noise_variance, args.smoothing
    )
    observation = ObservationVector(values, problem.observation_kind)
    estimators = [EstimatorId.parse(e) for e in args.estimators.split(",") if e.strip()]

    estimates: Dict[str, Any] = {}
    for k, estimator_id in enumerate(estimators):
        reason = estimator_availability(estimator_id, problem)
        if reason:
            estimates[estimator_id.value] = {"estimate": None, "reason": reason}
            continue
        rng = trial_stream(config.runtime.seed, k)
        try:
            report = fit_estimator(estimator_id, problem, observation, config.solver, rng)
        except EstimatorUnavailableError as e:
            estimates[estimator_id.value] = {"estimate": None, "reason": e.message}
            continue
        diagnostics = {key: _json_ready(v) for key, v in report.diagnostics.items()}
        if not args.timing:
            diagnostics.pop("elapsed_s", None)
        estimates[estimator_id.value] = {
            "estimate": report.estimate.tolist(),
            "diagnostics": diagnostics,
            "flags": sorted(f.value for f in report.flags),
        }
    document = {"m": problem.m, "n": problem.n, "estimates": estimates}
    write_json_document(document, config.output.path)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    ctx = VerifyContext(
        trials=config.verify.trials,
        seed=config.runtime.seed,
        e_scale=sabotage_scale(args.sabotage),
        solver=config.solver,
    )
    only = [p.strip() for p in args.only.split(",")] if args.only else None
    outcomes = run_verification(ctx, only)
    table = outcome_table(outcomes)
    print(generate_markdown_table(table, title="Verification"))
    if config.output.path:
        write_results(table, config.output.path, config.output.format)
    raise_on_failure(outcomes)
    return EXIT_OK


COMMANDS = {
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
}


def exit_code_for(error: Exception) -> int:
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, VerificationError):
        return EXIT_VERIFY
    return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        configure_logging(
            level=args.log_level or os.getenv("LINPROBIT_LOG_LEVEL", "INFO"),
            log_dir=os.getenv("LINPROBIT_LOG_DIR", "logs"),
        )
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except Exception as e:
        handle_error(e, {"command": args.command})
        message = e.message if isinstance(e, LinProbitError) else str(e)
        print(f"linprobit {args.command}: {message}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
