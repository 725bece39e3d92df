"""
Command-line entry point.

    granger simulate       --config exp.json [--seed N]
    granger run            --config exp.json [--models VAR cMLP] [--seeds 0 1 2]
    granger sliding-window --panel eeg.csv --sampling-rate 100 [--config exp.json]
    granger score          --scores gc_scores.csv --truth truth.csv
    granger grad-check     [--points 100]

A JSON config is read first and long flags override its fields.

Exit codes: 0 = every run completed, 1 = some runs failed (completed ones
are kept), 2 = invalid input (nothing written).
"""

import argparse
import json
import logging
import sys
from typing import Optional

from pydantic import ValidationError

from granger.core.errors import GrangerError
from granger.models.experiment import ExperimentConfig
from granger.services import experiment_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_RUNS = 1
EXIT_INVALID = 2
GRAD_TOLERANCE = 1e-5

# flag dest -> (section, config key); section None = top level
_OVERRIDES = {
    "task": (None, "task"),
    "num_series": (None, "num_series"),
    "num_steps": (None, "num_steps"),
    "max_lag": (None, "max_lag"),
    "causal_lags": (None, "causal_lags"),
    "models": (None, "models"),
    "seeds": (None, "seeds"),
    "lr_grid": (None, "lr_grid"),
    "lambda_grid": (None, "lambda_grid"),
    "output_dir": (None, "output_dir"),
    "panel": (None, "panel_path"),
    "truth": (None, "truth_path"),
    "sampling_rate": (None, "sampling_rate"),
    "window_len": (None, "window_len"),
    "overlap": (None, "overlap"),
    "threshold": (None, "threshold"),
    "mlflow_uri": (None, "mlflow_uri"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "penalty": ("penalty", "kind"),
    "alpha": ("penalty", "alpha"),
}


def load_config(path: Optional[str], args: argparse.Namespace, defaults: Optional[dict] = None) -> ExperimentConfig:
    """
    Merge a JSON config file with command-line overrides and validate.

    Raises:
        ValidationError: Listing every violated field.
        OSError / json.JSONDecodeError: If the file cannot be read.
    """
    data = dict(defaults or {})
    if path:
        with open(path, encoding="utf-8") as handle:
            data.update(json.load(handle))
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            data[key] = value
        else:
            data[section] = {**(data.get(section) or {}), key: value}
    if getattr(args, "exclude_diagonal", False):
        data["exclude_diagonal"] = True
    if getattr(args, "scale", False):
        data["scale"] = True
    return ExperimentConfig.model_validate(data)


def _report_invalid(exc: Exception) -> int:
    if isinstance(exc, ValidationError):
        print(f"invalid configuration ({exc.error_count()} errors):", file=sys.stderr)
        for error in exc.errors():
            where = ".".join(str(part) for part in error["loc"]) or "config"
            print(f"  {where}: {error['msg']}", file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INVALID


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_config(args.config, args, defaults={"task": "var3"})
    for seed in ([args.seed] if args.seed is not None else config.seeds):
        paths = experiment_service.simulate(config, seed)
        for name, path in paths.items():
            print(f"{name}: {path}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args)
    result = experiment_service.run_experiment(config)
    for row in result.aggregate:
        print(
            f"{row.model}: auroc={_fmt(row.auroc_mean)}±{_fmt(row.auroc_sd)} "
            f"aupr={_fmt(row.aupr_mean)}±{_fmt(row.aupr_sd)} runs={row.runs}"
        )
    for failure in result.failures:
        print(f"FAILED {failure.model} seed {failure.seed}: {failure.error}", file=sys.stderr)
    return EXIT_FAILED_RUNS if result.failures else EXIT_OK


def cmd_sliding_window(args: argparse.Namespace) -> int:
    config = load_config(args.config, args, defaults={"task": "sliding-window"})
    result = experiment_service.run_sliding_window(config)
    print(f"windows: {result.provenance['windows']}  stride: {result.provenance['stride']}")
    for failure in result.failures:
        print(f"FAILED {failure.model}: {failure.error}", file=sys.stderr)
    return EXIT_FAILED_RUNS if result.failures else EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    metrics = experiment_service.score_files(args.scores, args.truth, args.exclude_diagonal)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    report = experiment_service.run_grad_check(points=args.points, seed=args.seed or 0)
    failed = 0
    for name, error in report.items():
        status = "ok" if error < GRAD_TOLERANCE else "FAIL"
        failed += status == "FAIL"
        print(f"{status:4s} {name:24s} {error:.3e}")
    return EXIT_FAILED_RUNS if failed else EXIT_OK


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="ExperimentConfig JSON file (flags override it)")
    parser.add_argument("--task", choices=["var3", "lorenz96", "replicated-panel", "csv-panel", "sliding-window"])
    parser.add_argument("--num-series", type=int, help="Number of series p (synthetic tasks)")
    parser.add_argument("--num-steps", type=int, help="Number of time steps T (synthetic tasks)")
    parser.add_argument("--max-lag", type=int, help="Model lag K")
    parser.add_argument("--causal-lags", type=int, nargs="+", help="True VAR lags (var3)")
    parser.add_argument("--models", nargs="+", help="Model kinds, e.g. VAR cMLPwF cLSTM_s")
    parser.add_argument("--seeds", type=int, nargs="+", help="Seeds; one run per model and seed")
    parser.add_argument("--lr-grid", type=float, nargs="+", help="Learning-rate grid")
    parser.add_argument("--lambda-grid", type=float, nargs="+", help="Penalty-strength grid")
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--batch-size", type=int, help="Mini-batch size")
    parser.add_argument(
        "--penalty", choices=["GroupLasso", "SparseGroupLasso", "HierarchicalGroupLasso", "DecoupledL1"]
    )
    parser.add_argument("--alpha", type=float, help="SparseGroupLasso trade-off in (0, 1)")
    parser.add_argument("--panel", help="Panel file (csv-panel, replicated-panel, sliding-window)")
    parser.add_argument("--truth", help="Truth file (CSV matrix or edge list)")
    parser.add_argument("--sampling-rate", type=float, help="Samples per second of the panel")
    parser.add_argument("--window-len", type=int, help="Sliding-window length in samples")
    parser.add_argument("--overlap", type=float, help="Fraction of overlap between windows")
    parser.add_argument("--threshold", type=float, help="Threshold on min-max scaled scores")
    parser.add_argument("--scale", action="store_true", help="Standard-scale inputs per (series, lag)")
    parser.add_argument("--exclude-diagonal", action="store_true", help="Leave self-edges out of metrics")
    parser.add_argument("--output-dir", help="Root directory for artifacts")
    parser.add_argument("--mlflow-uri", help="Optional MLflow tracking URI")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="granger", description="Neural Granger-causality experiments")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Write a synthetic panel and its truth as CSV")
    _add_experiment_flags(simulate)
    simulate.add_argument("--seed", type=int, help="Single seed (default: every config seed)")
    simulate.set_defaults(handler=cmd_simulate)

    run = sub.add_parser("run", help="Run a batch experiment")
    _add_experiment_flags(run)
    run.set_defaults(handler=cmd_run)

    window = sub.add_parser("sliding-window", help="Per-window GC on a long CSV recording")
    _add_experiment_flags(window)
    window.set_defaults(handler=cmd_sliding_window)

    score = sub.add_parser("score", help="AUROC/AUPR of a score matrix against a truth matrix")
    score.add_argument("--scores", required=True, help="gc_scores.csv")
    score.add_argument("--truth", required=True, help="Truth CSV (p x p, 0/1)")
    score.add_argument("--exclude-diagonal", action="store_true")
    score.set_defaults(handler=cmd_score)

    check = sub.add_parser("grad-check", help="Gradient self-test of every primitive and model kind")
    check.add_argument("--points", type=int, default=experiment_service.GRAD_CHECK_POINTS, help="Random points per primitive / model (default: 100)")
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(handler=cmd_grad_check)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.handler(args)
    except (ValidationError, GrangerError, ValueError, OSError) as exc:
        logger.debug("Invalid input", exc_info=True)
        return _report_invalid(exc)


if __name__ == "__main__":
    sys.exit(main())
