"""Tests for granger/services/datagen.py — sparse VAR and Lorenz-96 simulators."""

import numpy as np
import pytest

from granger.core.errors import GenerationError, IntegrationError, UsageError
from granger.services import datagen


# ---------------------------------------------------------------------------
# Sparse VAR
# ---------------------------------------------------------------------------


class TestSimulateVar:
    def test_scalar_ar1_is_geometric(self):
        panel = datagen.simulate_var(
            1, 12, causal_lags=[1], coeff=0.5, noise_sd=0.0, burn_in=0, initial=[1.0]
        )
        assert panel.data[:, 0].tolist() == [0.5**t for t in range(12)]

    def test_zero_coefficients_give_noise_and_diagonal_truth(self):
        panel = datagen.simulate_var(5, 50, coeff=0.0, seed=3)
        assert np.array_equal(panel.truth, np.eye(5, dtype=np.int64))
        assert not np.any(panel.metadata["A"])
        assert np.std(panel.data) > 0

    def test_default_panel_is_stable_and_sparse(self):
        panel = datagen.simulate_var(10, 200, seed=0)
        assert panel.data.shape == (200, 10)
        assert panel.metadata["radius"] <= datagen.VAR_MAX_RADIUS
        assert panel.truth.sum(axis=1).tolist() == [2] * 10
        assert np.all(np.diag(panel.truth) == 1)

    def test_default_coefficients_sit_at_the_stability_edge(self):
        panel = datagen.simulate_var(10, 50, seed=0)
        A = panel.metadata["A"]
        assert panel.metadata["coeff"] < datagen.VAR_EDGE_START
        assert panel.metadata["radius"] <= datagen.VAR_MAX_RADIUS
        assert datagen.companion_radius(A / datagen.VAR_EDGE_SHRINK) > datagen.VAR_MAX_RADIUS
        assert set(np.unique(np.abs(A))) == {0.0, panel.metadata["coeff"]}

    def test_explicit_coefficient_is_kept(self):
        panel = datagen.simulate_var(10, 50, coeff=0.1, seed=0)
        assert panel.metadata["coeff"] == 0.1
        assert np.max(np.abs(panel.metadata["A"])) == 0.1

    def test_coefficients_follow_support(self):
        panel = datagen.simulate_var(6, 20, causal_lags=[1, 3], density=0.5, seed=2)
        A = panel.metadata["A"]
        assert A.shape == (3, 6, 6)
        assert not np.any(A[1])
        for k in (0, 2):
            assert np.array_equal(np.abs(A[k]) > 0, panel.truth == 1)
            assert np.all(np.diag(A[k]) > 0)

    def test_truth_lags_mark_causal_lags(self):
        panel = datagen.simulate_var(4, 30, causal_lags=[3, 4, 5], max_lag=5, seed=1)
        assert panel.truth_lags.shape == (4, 5)
        assert panel.truth_lags[0].tolist() == [0, 0, 1, 1, 1]

    def test_same_seed_same_panel(self):
        a = datagen.simulate_var(5, 40, seed=7)
        b = datagen.simulate_var(5, 40, seed=7)
        c = datagen.simulate_var(5, 40, seed=8)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_unstable_draws_raise_generation_error(self):
        with pytest.raises(GenerationError, match="smaller coeff"):
            datagen.simulate_var(3, 10, causal_lags=[1], density=1.0, coeff=5.0)

    def test_causal_lag_beyond_max_lag(self):
        with pytest.raises(UsageError):
            datagen.simulate_var(3, 10, causal_lags=[4], max_lag=3)

    def test_companion_radius_of_scalar_ar1(self):
        assert datagen.companion_radius(np.array([[[0.5]]])) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# Lorenz-96
# ---------------------------------------------------------------------------


class TestLorenz96:
    def test_forcing_is_a_fixed_point(self):
        assert datagen.lorenz96_derivative(np.full(6, 20.0), 20.0).tolist() == [0.0] * 6

    def test_truth_row_wraps_around(self):
        truth = datagen.lorenz96_truth(20)
        assert np.flatnonzero(truth[0]).tolist() == [0, 1, 18, 19]
        assert truth.sum(axis=1).tolist() == [4] * 20

    def test_short_simulation(self):
        panel = datagen.simulate_lorenz96(5, 30, seed=0, burn_in=10)
        assert panel.data.shape == (30, 5)
        assert panel.sampling_rate == pytest.approx(20.0)
        assert np.all(np.isfinite(panel.data))

    def test_deterministic_per_seed(self):
        a = datagen.simulate_lorenz96(4, 10, seed=1, burn_in=5)
        b = datagen.simulate_lorenz96(4, 10, seed=1, burn_in=5)
        assert np.array_equal(a.data, b.data)

    def test_needs_four_series(self):
        with pytest.raises(UsageError):
            datagen.simulate_lorenz96(3, 10)

    def test_divergence_is_integration_error(self):
        x0 = np.array([1e5, -1e5, 2e5, 0.0, 3e5])
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(IntegrationError, match="smaller internal step"):
                datagen.integrate_lorenz96(x0, 5, dt_record=1.0, substeps=1)
