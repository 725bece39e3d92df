"""Shared fixtures and small panels for the granger test suite."""

import numpy as np
import pytest


# ---------------------------------------------------------------------------
# Shared fixture data
# ---------------------------------------------------------------------------

# 2 replicates x 5 time points x 3 series, tab separated, one header line
REPLICATED_PANEL_TEXT = (
    "Time\tG1\tG2\tG3\n"
    "0\t0.10\t0.20\t0.30\n"
    "10\t0.11\t0.21\t0.31\n"
    "20\t0.12\t0.22\t0.32\n"
    "30\t0.13\t0.23\t0.33\n"
    "40\t0.14\t0.24\t0.34\n"
    "\n"
    "0\t0.50\t0.60\t0.70\n"
    "10\t0.51\t0.61\t0.71\n"
    "20\t0.52\t0.62\t0.72\n"
    "30\t0.53\t0.63\t0.73\n"
    "40\t0.54\t0.64\t0.74\n"
)

PANEL_CSV_TEXT = "a,b\n1.0,2.0\n1.5,2.5\n2.0,3.5\n"


@pytest.fixture
def replicated_panel_file(tmp_path):
    """Path to the two-replicate fixture panel."""
    path = tmp_path / "timecourses.tsv"
    path.write_text(REPLICATED_PANEL_TEXT)
    return str(path)


@pytest.fixture
def panel_csv_file(tmp_path):
    path = tmp_path / "panel.csv"
    path.write_text(PANEL_CSV_TEXT)
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_experiment(tmp_path):
    """
    A var3 ExperimentConfig small enough to run end to end in a few seconds.
    """
    from granger.models.experiment import ExperimentConfig

    return ExperimentConfig(
        task="var3",
        num_series=3,
        num_steps=60,
        max_lag=2,
        causal_lags=[1],
        density=0.5,
        var_coeff=0.3,
        models=["VAR"],
        lr_grid=[0.05],
        lambda_grid=[1e-3],
        train={"epochs": 3, "batch_size": 16},
        seeds=[0],
        output_dir=str(tmp_path / "results"),
    )
