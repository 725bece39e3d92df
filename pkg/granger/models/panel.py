from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class TimeSeriesPanel:
    data: np.ndarray                          # (T, p) float64, rows = time, oldest first
    series_names: list[str]
    truth: Optional[np.ndarray] = None        # (p, p) 0/1; truth[i, j] = 1 iff j Granger-causes i
    truth_lags: Optional[np.ndarray] = None   # (p, K) 0/1; truth_lags[i, k] = 1 iff lag k+1 drives i
    replicate_lengths: Optional[list[int]] = None  # None = a single replicate spanning all rows
    start_sample: int = 0                     # offset of row 0 inside the parent recording
    sampling_rate: Optional[float] = None     # Hz; None when the time axis is unitless
    metadata: dict = field(default_factory=dict)  # generator constants, source path, ...

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"panel data must be 2-D (T, p), got shape {self.data.shape}")
        if len(self.series_names) != self.data.shape[1]:
            raise ValueError(
                f"{len(self.series_names)} series names for {self.data.shape[1]} columns"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("panel data contains non-finite values")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int64)
            p = self.num_series
            if self.truth.shape != (p, p):
                raise ValueError(f"truth must be ({p}, {p}), got {self.truth.shape}")
        if self.truth_lags is not None:
            self.truth_lags = np.asarray(self.truth_lags, dtype=np.int64)
        if self.replicate_lengths is not None and sum(self.replicate_lengths) != self.num_steps:
            raise ValueError(
                f"replicate lengths sum to {sum(self.replicate_lengths)}, panel has {self.num_steps} rows"
            )

    @property
    def num_steps(self) -> int:
        return self.data.shape[0]

    @property
    def num_series(self) -> int:
        return self.data.shape[1]

    @property
    def replicates(self) -> list[int]:
        return list(self.replicate_lengths) if self.replicate_lengths else [self.num_steps]

    @property
    def start_seconds(self) -> Optional[float]:
        if self.sampling_rate is None:
            return None
        return self.start_sample / self.sampling_rate


@dataclass
class LaggedDataset:
    inputs: np.ndarray       # (N, K, p); inputs[n, k] = x_{t-k-1}, row 0 = most recent lag
    targets: np.ndarray      # (N, p); targets[n] = x_t
    series_names: list[str]

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be (N, K, p), got {self.inputs.shape}")
        n, _, p = self.inputs.shape
        if self.targets.shape != (n, p):
            raise ValueError(f"targets must be ({n}, {p}), got {self.targets.shape}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def max_lag(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_series(self) -> int:
        return self.inputs.shape[2]

    def subset(self, indices) -> "LaggedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LaggedDataset(self.inputs[idx], self.targets[idx], list(self.series_names))


@dataclass
class ScalerStats:
    input_mean: np.ndarray   # (K, p)
    input_sd: np.ndarray     # (K, p); coordinates with sd < 1e-12 pass through (mean 0, sd 1)
    target_mean: np.ndarray  # (p,)
    target_sd: np.ndarray    # (p,)
