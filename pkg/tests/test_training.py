"""Tests for granger/services/training.py — Adam, the training loop and grid search.

Covers:
  - adam_step against hand-computed updates and its error cases
  - train: epochs=0, determinism, linear recovery, divergence reporting
  - grid_search: selection by unpenalized validation MSE, tie-break, divergent points
  - decoupled (wF) kinds fitting as well as their plain kinds without a penalty
"""

from unittest.mock import patch

import numpy as np
import pytest

from granger.core.errors import GridSearchError, NumericError, TrainingDivergedError, UsageError
from granger.models.experiment import PenaltyConfig, TrainConfig
from granger.models.panel import LaggedDataset
from granger.services.autodiff import Graph, as_tensor, backward, mse
from granger.services.forecasters import build_model, model_config
from granger.services.training import AdamState, adam_step, grid_search, train, validation_mse


def _linear_dataset(n=200, coeff=0.6, seed=0):
    """Noiseless x_t = coeff * x_{t-1} on i.i.d. uniform inputs (p = K = 1)."""
    inputs = np.random.default_rng(seed).uniform(-1, 1, size=(n, 1, 1))
    return LaggedDataset(inputs, coeff * inputs[:, 0, :], ["x"])


def _var(p=1, K=1, seed=0):
    return build_model(model_config("VAR", p, K), seed=seed)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdamStep:
    def test_first_step_moves_by_learning_rate(self):
        state = AdamState.zeros_like({"w": np.zeros(1)})
        params, state = adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, state, lr=0.1, eps=0.0, t=1)
        assert params["w"][0] == pytest.approx(-0.1, abs=1e-15)
        assert state.m["w"][0] == pytest.approx(0.1)

    def test_zero_gradient_leaves_params(self):
        values = {"w": np.array([1.5, -2.0])}
        state = AdamState.zeros_like(values)
        params, _ = adam_step(values, {"w": np.zeros(2)}, state, lr=0.1, t=1)
        assert params["w"].tolist() == [1.5, -2.0]

    def test_missing_gradient_counts_as_zero(self):
        values = {"w": np.array([3.0])}
        params, _ = adam_step(values, {"w": None}, AdamState.zeros_like(values), lr=0.1, t=1)
        assert params["w"].tolist() == [3.0]

    def test_inputs_are_not_mutated(self):
        values = {"w": np.array([1.0])}
        state = AdamState.zeros_like(values)
        adam_step(values, {"w": np.array([2.0])}, state, lr=0.1, t=1)
        assert values["w"].tolist() == [1.0]
        assert state.m["w"].tolist() == [0.0]

    def test_step_counter_starts_at_one(self):
        values = {"w": np.zeros(1)}
        with pytest.raises(UsageError):
            adam_step(values, {"w": np.ones(1)}, AdamState.zeros_like(values), lr=0.1, t=0)

    def test_non_finite_gradient_names_group(self):
        values = {"W1": np.zeros(2)}
        with pytest.raises(NumericError, match="W1"):
            adam_step(values, {"W1": np.array([np.inf, 0.0])}, AdamState.zeros_like(values), lr=0.1, t=1)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TestTrain:
    def test_zero_epochs_leave_model_unchanged(self):
        model = _var()
        before = model.state_dict()
        result = train(model, _linear_dataset(), PenaltyConfig(), TrainConfig(epochs=0))
        assert len(result.history) == 0
        assert result.best_epoch == 0
        after = result.best_model.state_dict()
        assert all(np.array_equal(before[name], after[name]) for name in before)

    def test_recovers_linear_coefficient_without_penalty(self):
        dataset = _linear_dataset(coeff=0.6)
        config = TrainConfig(epochs=500, batch_size=200, learning_rate=0.01)
        result = train(_var(), dataset, PenaltyConfig(lam=0.0), config, validation=_linear_dataset(50, seed=1))
        assert result.best_model.params["A"].values[0, 0, 0] == pytest.approx(0.6, abs=1e-2)
        assert result.best_val_mse < 1e-3

    def test_identical_runs_are_bitwise_identical(self):
        dataset = LaggedDataset(np.random.default_rng(3).normal(size=(40, 2, 3)), np.random.default_rng(4).normal(size=(40, 3)), ["a", "b", "c"])
        config = TrainConfig(epochs=4, batch_size=8, learning_rate=0.01, seed=5)
        runs = []
        for _ in range(2):
            model = build_model(model_config("cMLP", 3, 2, target_index=1, hidden_layers=[4]), seed=5)
            runs.append(train(model, dataset, PenaltyConfig(lam=0.01), config))
        first, second = runs[0].model.state_dict(), runs[1].model.state_dict()
        assert all(np.array_equal(first[name], second[name]) for name in first)
        assert runs[0].history.val_mse == runs[1].history.val_mse

    def test_history_has_one_row_per_epoch(self):
        result = train(_var(), _linear_dataset(), PenaltyConfig(lam=0.01), TrainConfig(epochs=3, batch_size=50))
        frame = result.history.to_frame()
        assert frame["epoch"].tolist() == [1, 2, 3]
        assert list(frame.columns) == ["epoch", "data_loss", "penalty", "val_mse", "seconds"]

    def test_selection_uses_unpenalized_validation_mse(self):
        validation = _linear_dataset(30, seed=2)
        result = train(_var(), _linear_dataset(), PenaltyConfig(lam=0.5), TrainConfig(epochs=5), validation=validation)
        assert result.best_val_mse == validation_mse(result.best_model, validation)

    def test_divergence_reports_last_finite_epoch(self):
        config = TrainConfig(epochs=3, batch_size=200, learning_rate=1e300)
        with pytest.raises(TrainingDivergedError) as info:
            train(_var(), _linear_dataset(), PenaltyConfig(), config)
        assert info.value.epoch == 1
        assert info.value.last_finite_epoch == 0

    def test_gradient_step_decreases_loss(self):
        model = _var(p=2, K=2, seed=1)
        inputs = np.random.default_rng(0).normal(size=(30, 2, 2))
        targets = as_tensor(np.random.default_rng(1).normal(size=(30, 2)))
        with Graph() as graph:
            loss = mse(model.forward(inputs), targets)
        backward(graph, loss)
        grads = {name: tensor.grad.copy() for name, tensor in model.params.items()}
        squared = sum(float(np.sum(g * g)) for g in grads.values())
        lr = 1e-6
        for name, tensor in model.params.items():
            tensor.values = tensor.values - lr * grads[name]
        after = mse(model.forward(inputs), targets).item()
        assert (loss.item() - after) == pytest.approx(lr * squared, rel=1e-3)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


class TestGridSearch:
    def test_singleton_grid_matches_train(self):
        dataset = _linear_dataset()
        config = TrainConfig(epochs=3, batch_size=64, seed=2)
        search = grid_search(model_config("VAR", 1, 1), dataset, [0.01], [0.001], config, workers=1)
        direct = train(
            _var(seed=2),
            dataset,
            PenaltyConfig(lam=0.001),
            config.model_copy(update={"learning_rate": 0.01, "lam": 0.001}),
        )
        assert search.selected[None].val_mse == direct.best_val_mse
        assert np.array_equal(search.models[None].params["A"].values, direct.best_model.params["A"].values)

    def test_ties_go_to_lower_lambda_then_lower_lr(self):
        config = TrainConfig(epochs=0)
        search = grid_search(model_config("VAR", 1, 1), _linear_dataset(), [0.1, 0.01], [1e-2, 1e-4], config, workers=1)
        assert len(search.points) == 4
        assert (search.selected[None].lam, search.selected[None].lr) == (1e-4, 0.01)

    def test_component_kinds_select_per_target(self):
        dataset = LaggedDataset(np.random.default_rng(0).normal(size=(30, 2, 3)), np.random.default_rng(1).normal(size=(30, 3)), ["a", "b", "c"])
        config = TrainConfig(epochs=1, batch_size=16)
        base = model_config("cMLP", 3, 2, target_index=0, hidden_layers=[3])
        search = grid_search(base, dataset, [0.01], [0.0, 0.1], config, workers=1)
        assert sorted(search.selected) == [0, 1, 2]
        assert [search.models[i].config.target_index for i in range(3)] == [0, 1, 2]
        assert len(search.points) == 6

    def test_diverging_point_is_flagged(self):
        config = TrainConfig(epochs=2, batch_size=200)
        search = grid_search(model_config("VAR", 1, 1), _linear_dataset(), [0.01, 1e300], [0.0], config, workers=1)
        flagged = [point for point in search.points if point.diverged]
        assert [point.lr for point in flagged] == [1e300]
        assert flagged[0].error
        assert search.selected[None].lr == 0.01

    def test_every_point_diverging_is_grid_search_error(self):
        config = TrainConfig(epochs=2, batch_size=200)
        with pytest.raises(GridSearchError) as info:
            grid_search(model_config("VAR", 1, 1), _linear_dataset(), [1e300], [0.0], config, workers=1)
        assert len(info.value.failures) == 1

    def test_workers_default_to_process_config(self):
        config = TrainConfig(epochs=0)
        with patch("granger.services.training.process_config") as process_config:
            process_config.workers = 1
            search = grid_search(model_config("VAR", 1, 1), _linear_dataset(), [0.01], [0.0], config)
        assert search.selected[None].lr == 0.01


# ---------------------------------------------------------------------------
# Decoupled variants
# ---------------------------------------------------------------------------


def _nonlinear_dataset(n, seed):
    """Series 0 follows tanh of its own lag 2 plus a linear pull from series 1, noise sd 0.1."""
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(n, 3, 2))
    target = 0.8 * np.tanh(2.0 * inputs[:, 1, 0]) + 0.5 * inputs[:, 2, 1] + rng.normal(0.0, 0.1, size=n)
    targets = np.stack([target, rng.normal(size=n)], axis=1)
    return LaggedDataset(inputs, targets, ["a", "b"])


class TestDecoupledVariants:
    # noise floor is 0.01 against a target variance near 0.75
    TOLERANCE = 0.05

    @pytest.mark.parametrize("plain,decoupled", [("cMLP", "cMLPwF"), ("cLSTM", "cLSTMwF")])
    def test_unpenalized_fit_matches_plain_kind(self, plain, decoupled):
        dataset = _nonlinear_dataset(200, seed=0)
        validation = _nonlinear_dataset(100, seed=1)
        config = TrainConfig(epochs=400, batch_size=40, learning_rate=0.01, seed=3)
        errors = {}
        for kind in (plain, decoupled):
            model = build_model(model_config(kind, 2, 3, target_index=0, hidden_layers=[8]), seed=3)
            errors[kind] = train(model, dataset, PenaltyConfig(lam=0.0), config, validation=validation).best_val_mse
        assert errors[plain] < 0.15
        assert abs(errors[decoupled] - errors[plain]) < self.TOLERANCE


@pytest.mark.slow
class TestPenaltyStrength:
    def test_large_lambda_prunes_every_series_factor(self):
        dataset = LaggedDataset(np.random.default_rng(0).normal(size=(100, 2, 3)), np.random.default_rng(1).normal(size=(100, 3)), ["a", "b", "c"])
        model = build_model(model_config("cMLPwF", 3, 2, target_index=0, hidden_layers=[5]), seed=0)
        config = TrainConfig(epochs=1000, batch_size=100, learning_rate=0.01)
        result = train(model, dataset, PenaltyConfig(lam=100.0), config)
        assert np.max(np.abs(result.model.params["v"].values)) < 1e-3
