"""
End-to-end experiment runs: data -> split -> (scale) -> grid search -> GC -> metrics.

Artifacts for one (model, seed) go to <output_dir>/<task>/<model>/<seed>/:

    results.json     RunResult plus metrics and convention flags
    gc_scores.csv    raw (p, p) series scores, rows = effects
    gc_scaled.csv    row-wise min-max scaled scores
    gc_binary.csv    thresholded graph
    lag_scores.csv   long format (effect, lag, score), when the model has lag scores
    history.csv      per-target training history of the selected grid point
    grid.csv         every grid point
    checkpoints/     selected models (JSON)

The task-level <output_dir>/<task>/results.json aggregates every run.
"""

import logging
import os
import time
from typing import Optional

import numpy as np
import pandas as pd

import granger
from granger.core.errors import ConfigError, GrangerError, UsageError
from granger.models.experiment import MODEL_KINDS, ExperimentConfig, ModelConfig, parse_model_name
from granger.models.panel import TimeSeriesPanel
from granger.models.results import AggregateRow, ExperimentResult, GCEstimate, RunFailure, RunResult
from granger.services import autodiff, datagen, evaluation, panel_service, storage_service, training
from granger.services.forecasters import build_model, model_config, model_grad_check, save_checkpoint

logger = logging.getLogger(__name__)


def design_constants(config: ExperimentConfig) -> dict:
    """Every constant a run depends on that is not an explicit config field."""
    return {
        "var_burn_in": datagen.VAR_BURN_IN,
        "var_max_radius": datagen.VAR_MAX_RADIUS,
        "var_max_attempts": datagen.VAR_MAX_ATTEMPTS,
        "var_edge_start": datagen.VAR_EDGE_START,
        "var_edge_shrink": datagen.VAR_EDGE_SHRINK,
        "lorenz_substeps": datagen.LORENZ_SUBSTEPS,
        "lorenz_burn_in": datagen.LORENZ_BURN_IN,
        "lorenz_init_sd": datagen.LORENZ_INIT_SD,
        "lorenz_noise_sd": datagen.LORENZ_NOISE_SD,
        "var_coeff": config.var_coeff,
        "var_noise_sd": config.var_noise_sd,
        "adam_beta1": config.train.adam_beta1,
        "adam_beta2": config.train.adam_beta2,
        "adam_eps": config.train.adam_eps,
        "eps_norm": autodiff.EPS_NORM,
        "scale_eps": panel_service.SCALE_EPS,
        "exclude_diagonal": config.exclude_diagonal,
        "penalty_batch_scaling": 1.0,
    }


def provenance(config: ExperimentConfig) -> dict:
    return {
        "config": config.model_dump(mode="json", by_alias=True),
        "version": granger.__version__,
        "numpy": np.__version__,
        "constants": design_constants(config),
    }


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_panel(config: ExperimentConfig, seed: int) -> TimeSeriesPanel:
    """Generate or read the panel a task runs on."""
    if config.task == "var3":
        return datagen.simulate_var(
            config.num_series,
            config.num_steps,
            causal_lags=config.causal_lags,
            density=config.density,
            coeff=config.var_coeff,
            noise_sd=config.var_noise_sd,
            seed=seed,
            max_lag=config.max_lag,
        )
    if config.task == "lorenz96":
        return datagen.simulate_lorenz96(
            config.num_series, config.num_steps, F=config.forcing, dt_record=config.dt_record, seed=seed
        )
    if config.task == "replicated-panel":
        return panel_service.load_replicated_panel(config.panel_path, config.truth_path)
    panel = panel_service.read_panel_csv(config.panel_path, sampling_rate=config.sampling_rate)
    if config.truth_path:
        panel.truth = panel_service.read_truth_csv(config.truth_path, panel.num_series)
    return panel


def simulate(config: ExperimentConfig, seed: int, output_dir: Optional[str] = None) -> dict[str, str]:
    """Write panel.csv, truth.csv (and truth_lags.csv for VAR) for a synthetic task."""
    if config.task not in ("var3", "lorenz96"):
        raise UsageError(f"simulate needs a synthetic task, got {config.task}")
    panel = load_panel(config, seed)
    directory = os.path.join(output_dir or config.output_dir, config.task, "data", str(seed))
    paths = {
        "panel": panel_service.write_panel_csv(os.path.join(directory, "panel.csv"), panel),
        "truth": panel_service.write_truth_csv(os.path.join(directory, "truth.csv"), panel.truth),
    }
    if panel.truth_lags is not None:
        paths["truth_lags"] = panel_service.write_truth_csv(
            os.path.join(directory, "truth_lags.csv"), panel.truth_lags
        )
    logger.info("Simulated %s seed %d into %s", config.task, seed, directory)
    return paths


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _lag_frame(estimate: GCEstimate, names: list[str]) -> pd.DataFrame:
    rows = [
        {"effect": names[i], "lag": k + 1, "score": float(estimate.lag_scores[i, k])}
        for i in range(estimate.lag_scores.shape[0])
        for k in range(estimate.lag_scores.shape[1])
    ]
    return pd.DataFrame(rows, columns=["effect", "lag", "score"])


def _history_frame(search: training.GridSearchResult) -> pd.DataFrame:
    frames = []
    for target, history in search.histories.items():
        frame = history.to_frame()
        frame.insert(0, "target", -1 if target is None else target)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def write_estimate(directory: str, estimate: GCEstimate, names: list[str]) -> None:
    storage_service.write_matrix_atomic(os.path.join(directory, "gc_scores.csv"), estimate.series_scores, names)
    if estimate.scaled_scores is not None:
        storage_service.write_matrix_atomic(os.path.join(directory, "gc_scaled.csv"), estimate.scaled_scores, names)
        storage_service.write_matrix_atomic(os.path.join(directory, "gc_binary.csv"), estimate.binary, names)


def log_to_mlflow(params: dict, metrics: dict, run_name: str, mlflow_uri: Optional[str]) -> None:
    """
    Log one run's parameters and metrics to MLflow.

    Silently skips if the tracking URI is not set; failures never fail the run.
    """
    if not mlflow_uri:
        logger.debug("mlflow_uri not set, skipping MLflow logging")
        return
    try:
        import mlflow

        mlflow.set_tracking_uri(mlflow_uri)
        with mlflow.start_run(run_name=run_name):
            mlflow.log_params(params)
            mlflow.log_metrics({k: v for k, v in metrics.items() if v is not None})
        logger.info("MLflow run %s logged to %s", run_name, mlflow_uri)
    except Exception:
        logger.warning("MLflow logging failed", exc_info=True)


# ---------------------------------------------------------------------------
# Batch experiments
# ---------------------------------------------------------------------------


def search_config(name: str, num_series: int, max_lag: int) -> ModelConfig:
    """ModelConfig for grid search; component kinds start at target 0 and are re-targeted per series."""
    try:
        kind, _ = parse_model_name(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    target = None if kind in ("VAR", "LeKVAR") else 0
    return model_config(name, num_series, max_lag, target_index=target)


def run_single(config: ExperimentConfig, name: str, seed: int, panel: Optional[TimeSeriesPanel] = None) -> RunResult:
    """Run one (model, seed) unit and write its artifacts."""
    started = time.perf_counter()
    panel = panel if panel is not None else load_panel(config, seed)
    K = config.lag_for(name)
    dataset = panel_service.make_lagged(panel, K)
    train_set, val_set = panel_service.train_val_split(dataset, config.train.val_fraction, seed)
    if config.scale:
        train_set, stats = panel_service.standard_scale(train_set)
        val_set = panel_service.apply_scaler(val_set, stats)

    base = search_config(name, panel.num_series, K)
    train_config = config.train.model_copy(update={"seed": seed})
    search = training.grid_search(
        base, train_set, config.lr_grid, config.lambda_grid, train_config, penalty=config.penalty, validation=val_set
    )

    estimate = evaluation.threshold_gc(evaluation.extract_gc(search.models), config.threshold)
    metrics = {"auroc": None, "aupr": None}
    if panel.truth is not None:
        metrics = evaluation.score_estimate(estimate, panel.truth, config.exclude_diagonal)
    lag_rate = None
    if config.task == "var3" and estimate.lag_scores is not None:
        lag_rate = evaluation.lag_recovery_rate(estimate.lag_scores, config.causal_lags)

    directory = storage_service.run_dir(config.output_dir, config.task, name, seed)
    write_estimate(directory, estimate, panel.series_names)
    if estimate.lag_scores is not None:
        storage_service.write_frame_atomic(os.path.join(directory, "lag_scores.csv"), _lag_frame(estimate, panel.series_names))
    storage_service.write_frame_atomic(os.path.join(directory, "history.csv"), _history_frame(search))
    grid = pd.DataFrame([point.model_dump() for point in search.points])
    storage_service.write_frame_atomic(os.path.join(directory, "grid.csv"), grid)
    for target, model in search.models.items():
        label = "joint" if target is None else f"target_{target}"
        save_checkpoint(model, os.path.join(directory, "checkpoints", f"{label}.json"))

    result = RunResult(
        model=name,
        seed=seed,
        selected=list(search.selected.values()),
        val_mse=search.val_mse,
        auroc=metrics["auroc"],
        aupr=metrics["aupr"],
        lag_recovery=lag_rate,
        seconds=time.perf_counter() - started,
    )
    storage_service.write_json_atomic(
        os.path.join(directory, "results.json"),
        {
            "run": result.model_dump(mode="json"),
            "threshold": config.threshold,
            "exclude_diagonal": config.exclude_diagonal,
            "scaled_inputs": config.scale,
        },
    )
    log_to_mlflow(
        params={"task": config.task, "model": name, "seed": seed, "epochs": config.train.epochs},
        metrics={"auroc": result.auroc, "aupr": result.aupr, "val_mse": result.val_mse},
        run_name=f"{config.task}-{name}-{seed}",
        mlflow_uri=config.mlflow_uri,
    )
    logger.info("Run %s seed %d: auroc=%s aupr=%s val=%.6f", name, seed, result.auroc, result.aupr, result.val_mse)
    return result


def _mean_sd(values: list[float]) -> tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, sd


def aggregate(runs: list[RunResult]) -> list[AggregateRow]:
    """Mean and sample sd across seeds, per model, in first-seen model order."""
    rows = []
    for name in dict.fromkeys(run.model for run in runs):
        mine = [run for run in runs if run.model == name]
        auroc_mean, auroc_sd = _mean_sd([r.auroc for r in mine if r.auroc is not None])
        aupr_mean, aupr_sd = _mean_sd([r.aupr for r in mine if r.aupr is not None])
        val_mean, val_sd = _mean_sd([r.val_mse for r in mine])
        rows.append(
            AggregateRow(
                model=name,
                runs=len(mine),
                auroc_mean=auroc_mean,
                auroc_sd=auroc_sd,
                aupr_mean=aupr_mean,
                aupr_sd=aupr_sd,
                val_mse_mean=val_mean,
                val_mse_sd=val_sd,
            )
        )
    return rows


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """
    Run every (model, seed) of ``config``; failed units are recorded, not raised.

    The panel of a seed is built once and shared by all models.
    """
    if config.task == "sliding-window":
        return run_sliding_window(config)
    result = ExperimentResult(task=config.task, provenance=provenance(config))
    for seed in config.seeds:
        try:
            panel = load_panel(config, seed)
        except (GrangerError, ValueError, OSError) as exc:
            logger.error("Could not build data for seed %d", seed, exc_info=True)
            result.failures.extend(RunFailure(model=name, seed=seed, error=str(exc)) for name in config.models)
            continue
        for name in config.models:
            try:
                result.runs.append(run_single(config, name, seed, panel=panel))
            except (GrangerError, ValueError) as exc:
                logger.error("Run %s seed %d failed", name, seed, exc_info=True)
                result.failures.append(RunFailure(model=name, seed=seed, error=str(exc)))
    result.aggregate = aggregate(result.runs)
    path = os.path.join(config.output_dir, config.task, "results.json")
    storage_service.write_json_atomic(path, result.model_dump(mode="json"))
    logger.info("Experiment %s: %d runs, %d failures -> %s", config.task, len(result.runs), len(result.failures), path)
    return result


# ---------------------------------------------------------------------------
# Sliding-window analysis
# ---------------------------------------------------------------------------


def _window_label(window: TimeSeriesPanel) -> str:
    if window.sampling_rate is None:
        return f"{window.start_sample}"
    return f"{window.start_seconds:g}s"


def fit_window(config: ExperimentConfig, name: str, window: TimeSeriesPanel, seed: int) -> tuple[GCEstimate, Optional[float]]:
    """
    Fit one window: chronological split, scaling from the training part, grid search, thresholded GC.

    A window in which every series is constant yields all-zero scores.
    """
    p = window.num_series
    if np.all(np.ptp(window.data, axis=0) == 0):
        logger.warning("Window at sample %d is constant; emitting zero scores", window.start_sample)
        estimate = GCEstimate(series_scores=np.zeros((p, p)), model_kind=name)
        return evaluation.threshold_gc(estimate, config.threshold), None

    dataset = panel_service.make_lagged(window, config.max_lag)
    train_set, held = panel_service.chronological_split(dataset, config.train_fraction)
    if config.scale:
        train_set, stats = panel_service.standard_scale(train_set)
        held = panel_service.apply_scaler(held, stats)
    base = search_config(name, p, config.max_lag)
    search = training.grid_search(
        base,
        train_set,
        config.lr_grid,
        config.lambda_grid,
        config.train.model_copy(update={"seed": seed}),
        penalty=config.penalty,
        validation=held,
    )
    estimate = evaluation.threshold_gc(evaluation.extract_gc(search.models), config.threshold)
    return estimate, search.val_mse


def run_sliding_window(config: ExperimentConfig, panel_path: Optional[str] = None) -> ExperimentResult:
    """
    Per-window GC for a long recording.

    Writes per window gc_scores.csv / gc_scaled.csv / gc_binary.csv under
    <output_dir>/sliding-window/<model>/window_<start>/ and a long-format
    gc_long.csv (window, cause, effect, score, binary) per model.
    """
    path = panel_path or config.panel_path
    panel = panel_service.read_panel_csv(path, sampling_rate=config.sampling_rate)
    windows = panel_service.sliding_windows(panel, config.window_len, config.overlap)
    if len(windows) < 2:
        logger.warning("Only %d window(s) fit the recording; proceeding", len(windows))
    seed = config.seeds[0]
    result = ExperimentResult(task="sliding-window", provenance=provenance(config))
    result.provenance["windows"] = len(windows)
    result.provenance["stride"] = panel_service.window_stride(config.window_len, config.overlap)

    for name in config.models:
        model_dir = os.path.join(config.output_dir, "sliding-window", name)
        long_rows = []
        val_scores = []
        for window in windows:
            label = _window_label(window)
            try:
                estimate, val = fit_window(config, name, window, seed)
            except (GrangerError, ValueError) as exc:
                logger.error("Window %s failed for %s", label, name, exc_info=True)
                result.failures.append(RunFailure(model=name, seed=seed, error=f"window {label}: {exc}"))
                continue
            write_estimate(os.path.join(model_dir, f"window_{label}"), estimate, window.series_names)
            start = window.start_seconds if window.sampling_rate else window.start_sample
            for i, effect in enumerate(window.series_names):
                for j, cause in enumerate(window.series_names):
                    long_rows.append(
                        {
                            "window": start,
                            "cause": cause,
                            "effect": effect,
                            "score": float(estimate.scaled_scores[i, j]),
                            "binary": int(estimate.binary[i, j]),
                        }
                    )
            if val is not None:
                val_scores.append(val)
        long_frame = pd.DataFrame(long_rows, columns=["window", "cause", "effect", "score", "binary"])
        storage_service.write_frame_atomic(os.path.join(model_dir, "gc_long.csv"), long_frame)
        if val_scores:
            result.runs.append(RunResult(model=name, seed=seed, val_mse=float(np.mean(val_scores))))

    result.aggregate = aggregate(result.runs)
    storage_service.write_json_atomic(
        os.path.join(config.output_dir, "sliding-window", "results.json"), result.model_dump(mode="json")
    )
    return result


# ---------------------------------------------------------------------------
# Scoring and self-tests
# ---------------------------------------------------------------------------


def score_files(scores_path: str, truth_path: str, exclude_diagonal: bool = False) -> dict:
    """AUROC/AUPR of a gc_scores.csv against a truth CSV."""
    scores = pd.read_csv(scores_path, index_col=0).to_numpy(dtype=np.float64)
    truth = panel_service.read_truth_csv(truth_path, scores.shape[0])
    estimate = GCEstimate(series_scores=scores, model_kind="file")
    return evaluation.score_estimate(estimate, truth, exclude_diagonal)


def _primitive_cases(rng: np.random.Generator) -> dict:
    """Scalar test functions, one per primitive, each with a point sampler."""
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(4, 2))
    row = rng.uniform(-2, 2, size=(4,))
    weights = rng.uniform(-1, 1, size=(3, 4))
    stacked = rng.uniform(-1, 1, size=(6, 4))

    def weighted(t):
        return autodiff.total(autodiff.multiply(t, autodiff.as_tensor(weights)))

    return {
        "add": (lambda x: weighted(autodiff.add(x, autodiff.as_tensor(row))), (3, 4)),
        "subtract": (lambda x: weighted(autodiff.subtract(x, autodiff.as_tensor(a))), (3, 4)),
        "multiply": (lambda x: weighted(autodiff.multiply(x, autodiff.as_tensor(a))), (3, 4)),
        "scale": (lambda x: weighted(autodiff.scale(x, -1.7)), (3, 4)),
        "matmul": (lambda x: autodiff.total(autodiff.matmul(x, autodiff.as_tensor(b))), (3, 4)),
        "sigmoid": (lambda x: weighted(autodiff.sigmoid(x)), (3, 4)),
        "tanh": (lambda x: weighted(autodiff.tanh(x)), (3, 4)),
        "norm": (lambda x: autodiff.norm(x), (3, 4)),
        "row_norms": (lambda x: autodiff.total(autodiff.row_norms(x)), (3, 4)),
        "normalize": (lambda x: weighted(autodiff.normalize(x)), (3, 4)),
        "abs": (lambda x: weighted(autodiff.absolute(x)), (3, 4)),
        "sum": (lambda x: autodiff.total(x), (3, 4)),
        "mse": (lambda x: autodiff.mse(x, autodiff.as_tensor(a)), (3, 4)),
        "concat": (
            lambda x: autodiff.total(
                autodiff.multiply(autodiff.concat([x, autodiff.as_tensor(a)], axis=0), autodiff.as_tensor(stacked))
            ),
            (3, 4),
        ),
        "slice": (lambda x: weighted(autodiff.take(autodiff.concat([x, x], axis=1), 2, 6, axis=1)), (3, 4)),
        "reshape": (lambda x: autodiff.total(autodiff.multiply(autodiff.reshape(x, (4, 3)), autodiff.as_tensor(weights.reshape(4, 3)))), (3, 4)),
        "transpose": (lambda x: autodiff.total(autodiff.multiply(autodiff.transpose(x), autodiff.as_tensor(weights.T))), (3, 4)),
    }


GRAD_CHECK_POINTS = 100
_GRAD_CHECK_SHAPE = (3, 2)  # (p, K) of the models under check


def check_primitive(name: str, points: int = GRAD_CHECK_POINTS, seed: int = 0, step: float = 1e-5) -> float:
    """Worst relative gradient error of primitive ``name`` over ``points`` random points in [-2, 2]."""
    if name not in autodiff.PRIMITIVES:
        raise UsageError(f"Unknown primitive '{name}'. Available: {list(autodiff.PRIMITIVES)}")
    rng = np.random.default_rng([seed, autodiff.PRIMITIVES.index(name)])
    function, shape = _primitive_cases(rng)[name]
    worst = 0.0
    for _ in range(points):
        point = autodiff.Tensor(rng.uniform(-2, 2, size=shape))
        worst = max(worst, autodiff.grad_check(function, point, step=step))
    return worst


def check_model_kind(kind: str, points: int = GRAD_CHECK_POINTS, seed: int = 0, step: float = 1e-5) -> float:
    """Worst relative error over every parameter of ``points`` random initializations of ``kind``."""
    if kind not in MODEL_KINDS:
        raise UsageError(f"Unknown model kind '{kind}'. Available: {list(MODEL_KINDS)}")
    rng = np.random.default_rng([seed, len(autodiff.PRIMITIVES) + MODEL_KINDS.index(kind)])
    p, K = _GRAD_CHECK_SHAPE
    target = None if kind in ("VAR", "LeKVAR") else 0
    worst = 0.0
    for trial in range(points):
        model = build_model(model_config(kind, p, K, target_index=target, hidden_layers=[4]), seed=seed + trial)
        inputs = rng.uniform(-2, 2, size=(5, K, p))
        targets = rng.uniform(-1, 1, size=(5, len(model.targets)))
        worst = max(worst, max(model_grad_check(model, inputs, targets, step=step).values()))
    return worst


def run_grad_check(points: int = GRAD_CHECK_POINTS, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error per primitive and per model kind."""
    report = {}
    for name in autodiff.PRIMITIVES:
        report[f"primitive:{name}"] = check_primitive(name, points, seed, step)
    for kind in MODEL_KINDS:
        report[f"model:{kind}"] = check_model_kind(kind, points, seed, step)
        logger.info("grad_check %s: %.3e", kind, report[f"model:{kind}"])
    return report
