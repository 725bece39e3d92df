"""
Mini-batch Adam on the penalized objective, plus grid search.

The loss of one batch is mse(batch) + lambda * Omega(weights); the penalty is
not scaled by the batch fraction. Model selection always uses the
validation MSE without the penalty.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from granger.core.config import config as process_config
from granger.core.errors import DimensionError, GridSearchError, NumericError, TrainingDivergedError, UsageError
from granger.core.seeding import rng_stream
from granger.models.experiment import ModelConfig, PenaltyConfig, TrainConfig
from granger.models.panel import LaggedDataset
from granger.models.results import GridPoint, TrainHistory
from granger.services.autodiff import Graph, Tensor, add, as_tensor, backward, mse
from granger.services.forecasters import Forecaster, build_model
from granger.services.panel_service import train_val_split
from granger.services.penalties import check_compatible, penalty_term

logger = logging.getLogger(__name__)

_LOG_EVERY = 50


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update; inputs are left untouched.

    A missing gradient (parameter unused by the loss) counts as zero.

    Raises:
        UsageError: If t < 1.
        NumericError: If a gradient is non-finite (names the parameter group).
        DimensionError: If state and parameter shapes differ.
    """
    if t < 1:
        raise UsageError(f"Adam step counter must start at 1, got {t}")
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in parameter group '{name}'")
        m, v = state.m[name], state.v[name]
        if m.shape != value.shape or v.shape != value.shape:
            raise DimensionError(f"adam state '{name}'", value.shape, m.shape)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v)


class Adam:
    """Adam over a model's parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = AdamState.zeros_like({n: p.values for n, p in params.items()})

    def step(self) -> None:
        self.t += 1
        values = {name: tensor.values for name, tensor in self.params.items()}
        grads = {name: tensor.grad for name, tensor in self.params.items()}
        updated, self.state = adam_step(values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.t)
        for name, value in updated.items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"parameter group '{name}' became non-finite")
            self.params[name].values = value

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Forecaster          # parameters after the last epoch
    best_model: Forecaster     # snapshot with the lowest validation MSE
    history: TrainHistory
    best_val_mse: float
    best_epoch: int            # 0 = the initial parameters


def _target_values(model: Forecaster, dataset: LaggedDataset) -> np.ndarray:
    return dataset.targets[:, model.targets]


def validation_mse(model: Forecaster, dataset: LaggedDataset) -> float:
    """Mean squared one-step error of ``model`` on ``dataset``; no penalty, no graph."""
    pred = model.predict(dataset.inputs)
    diff = pred - _target_values(model, dataset)
    return float(np.mean(diff * diff))


def train(
    model: Forecaster,
    dataset: LaggedDataset,
    penalty: PenaltyConfig,
    config: TrainConfig,
    validation: Optional[LaggedDataset] = None,
) -> TrainResult:
    """
    Train ``model`` in place on mse + lambda * penalty with mini-batch Adam.

    Args:
        model: Forecaster to train; its parameters are updated in place.
        dataset: Samples; split with ``config.val_fraction`` unless ``validation`` is given.
        penalty: Penalty kind and strength.
        config: Optimizer and schedule settings.
        validation: Held-out samples; when given, ``dataset`` is used whole for training.

    Returns:
        TrainResult with the final model and the best-validation snapshot.

    Raises:
        ConfigError: If the penalty cannot act on the model kind.
        TrainingDivergedError: If the loss or parameters become non-finite.
    """
    check_compatible(model.config, penalty)
    if validation is None:
        train_set, validation = train_val_split(dataset, config.val_fraction, config.seed)
    else:
        train_set = dataset
    inputs = train_set.inputs
    targets = _target_values(model, train_set)
    n = len(train_set)
    unit = 0 if model.config.target_index is None else model.config.target_index + 1
    rng = rng_stream(config.seed, "batching", unit)
    optimizer = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    history = TrainHistory()
    best_model = model.copy()
    best_val = validation_mse(model, validation)
    best_epoch = 0
    last_finite = 0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        data_total = 0.0
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                optimizer.zero_grad()
                with Graph() as graph:
                    data_term = mse(model.forward(inputs[idx]), as_tensor(targets[idx]))
                    loss = add(data_term, penalty_term(model, penalty))
                backward(graph, loss)
                optimizer.step()
                model.post_step()
                data_total += data_term.item() * len(idx)
            penalty_value = penalty_term(model, penalty).item()
            val = validation_mse(model, validation)
        except NumericError as exc:
            logger.warning("%s diverged at epoch %d: %s", model.config.name, epoch, exc)
            raise TrainingDivergedError(epoch, last_finite) from exc
        if not np.isfinite(val):
            raise TrainingDivergedError(epoch, last_finite)
        last_finite = epoch

        history.append(epoch, data_total / n, penalty_value, val, time.perf_counter() - started)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_model = model.copy()
        if epoch == 1 or epoch % _LOG_EVERY == 0:
            logger.info(
                "Epoch %d/%d  data=%.6f  penalty=%.6f  val=%.6f",
                epoch, config.epochs, data_total / n, penalty_value, val,
            )

    return TrainResult(model=model, best_model=best_model, history=history, best_val_mse=best_val, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass
class GridSearchResult:
    points: list[GridPoint]
    selected: dict[Optional[int], GridPoint]           # winning point per target (None = joint model)
    models: dict[Optional[int], Forecaster]            # best-validation snapshot per target
    histories: dict[Optional[int], TrainHistory] = field(default_factory=dict)

    @property
    def val_mse(self) -> float:
        return float(np.mean([point.val_mse for point in self.selected.values()]))


def _fit_point(
    model_config: ModelConfig,
    dataset: LaggedDataset,
    penalty: PenaltyConfig,
    config: TrainConfig,
    validation: Optional[LaggedDataset],
) -> tuple[GridPoint, Optional[TrainResult]]:
    target = model_config.target_index
    model = build_model(model_config, seed=config.seed)
    try:
        result = train(model, dataset, penalty, config, validation=validation)
    except TrainingDivergedError as exc:
        point = GridPoint(target=target, lam=penalty.lam, lr=config.learning_rate, diverged=True, error=str(exc))
        return point, None
    point = GridPoint(
        target=target,
        lam=penalty.lam,
        lr=config.learning_rate,
        val_mse=result.best_val_mse,
        best_epoch=result.best_epoch,
    )
    logger.info(
        "Grid point %s target=%s lambda=%g lr=%g -> val=%.6f (epoch %d)",
        model_config.name, target, penalty.lam, config.learning_rate, result.best_val_mse, result.best_epoch,
    )
    return point, result


def _fit_point_star(args: tuple) -> tuple[GridPoint, Optional[TrainResult]]:
    return _fit_point(*args)


def grid_search(
    model_config: ModelConfig,
    dataset: LaggedDataset,
    lr_grid: list[float],
    lambda_grid: list[float],
    config: TrainConfig,
    penalty: Optional[PenaltyConfig] = None,
    validation: Optional[LaggedDataset] = None,
    workers: Optional[int] = None,
) -> GridSearchResult:
    """
    Train one model per (target, lambda, lr) and keep the best per target.

    Component-wise kinds are searched independently for every target
    series. Ties on validation MSE go to the lower lambda, then the lower lr.

    Args:
        model_config: Architecture; its target_index is replaced per target.
        dataset: Samples, split as in ``train``.
        lr_grid: Learning rates.
        lambda_grid: Penalty strengths.
        config: Base TrainConfig; learning_rate and lambda are overridden per point.
        penalty: Penalty kind (lambda overridden per point); GroupLasso by default.
        validation: Optional fixed validation set.
        workers: Process count; defaults to GRANGER_WORKERS.

    Raises:
        UsageError: If a grid is empty.
        GridSearchError: If every point of some target diverged.
    """
    if not lr_grid or not lambda_grid:
        raise UsageError("grid_search needs nonempty lr and lambda grids")
    penalty = penalty or PenaltyConfig()
    check_compatible(model_config, penalty)
    targets = list(range(model_config.num_series)) if model_config.is_component else [None]

    units, keys = [], []
    for target in targets:
        unit_config = model_config.model_copy(update={"target_index": target})
        for lam in lambda_grid:
            for lr in lr_grid:
                point_penalty = penalty.model_copy(update={"lam": float(lam)})
                point_config = config.model_copy(update={"learning_rate": float(lr), "lam": float(lam)})
                units.append((unit_config, dataset, point_penalty, point_config, validation))
                keys.append((target, float(lam), float(lr)))

    workers = process_config.workers if workers is None else workers
    if workers > 1 and len(units) > 1:
        logger.info("Grid search over %d points on %d workers", len(units), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = dict(zip(keys, pool.map(_fit_point_star, units)))
    else:
        outcomes = {key: _fit_point(*unit) for key, unit in zip(keys, units)}

    points, selected, models, histories = [], {}, {}, {}
    for target in targets:
        candidates = []
        for key in keys:
            if key[0] != target:
                continue
            point, result = outcomes[key]
            points.append(point)
            if result is not None:
                candidates.append((point.val_mse, point.lam, point.lr, point, result))
        if not candidates:
            failures = [outcomes[k][0].error for k in keys if k[0] == target]
            raise GridSearchError(f"every grid point diverged for {model_config.name} target {target}", failures)
        diverged = sum(1 for k in keys if k[0] == target and outcomes[k][0].diverged)
        if diverged:
            logger.warning("%d grid point(s) diverged for %s target %s", diverged, model_config.name, target)
        _, _, _, point, result = min(candidates, key=lambda c: (c[0], c[1], c[2]))
        selected[target] = point
        models[target] = result.best_model
        histories[target] = result.history
    return GridSearchResult(points=points, selected=selected, models=models, histories=histories)
