from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

HISTORY_COLUMNS = ["epoch", "data_loss", "penalty", "val_mse", "seconds"]


@dataclass
class GCEstimate:
    series_scores: np.ndarray                 # (p, p) >= 0; [i, j] = evidence that j causes i
    model_kind: str
    lag_scores: Optional[np.ndarray] = None   # (p, K) >= 0
    scaled_scores: Optional[np.ndarray] = None  # row-wise min-max scaled series_scores
    threshold: Optional[float] = None
    binary: Optional[np.ndarray] = None       # (p, p) 0/1, present iff threshold is

    def __post_init__(self) -> None:
        self.series_scores = np.asarray(self.series_scores, dtype=np.float64)
        if np.any(self.series_scores < 0):
            raise ValueError("GC series scores must be nonnegative")
        if self.lag_scores is not None:
            self.lag_scores = np.asarray(self.lag_scores, dtype=np.float64)
            if np.any(self.lag_scores < 0):
                raise ValueError("GC lag scores must be nonnegative")
        if (self.threshold is None) != (self.binary is None):
            raise ValueError("binary graph and threshold must be given together")

    @property
    def num_series(self) -> int:
        return self.series_scores.shape[0]


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    data_loss: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch: int, data_loss: float, penalty: float, val_mse: float, seconds: float) -> None:
        self.epoch.append(epoch)
        self.data_loss.append(data_loss)
        self.penalty.append(penalty)
        self.val_mse.append(val_mse)
        self.seconds.append(seconds)

    def __len__(self) -> int:
        return len(self.epoch)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({name: getattr(self, name) for name in HISTORY_COLUMNS}, columns=HISTORY_COLUMNS)


class GridPoint(BaseModel):
    """Outcome of training one model at one (lambda, lr) pair."""

    target: Optional[int] = Field(None, description="Target series; None for joint models")
    lam: float
    lr: float
    val_mse: Optional[float] = None
    best_epoch: Optional[int] = None
    diverged: bool = False
    error: Optional[str] = None


class RunResult(BaseModel):
    model: str
    seed: int
    selected: list[GridPoint] = Field(default_factory=list, description="Winning grid point per target")
    val_mse: float
    auroc: Optional[float] = None
    aupr: Optional[float] = None
    lag_recovery: Optional[float] = Field(None, description="Fraction of target rows whose top lags are exact")
    seconds: float = 0.0


class RunFailure(BaseModel):
    model: str
    seed: int
    error: str


class AggregateRow(BaseModel):
    model: str
    runs: int
    auroc_mean: Optional[float] = None
    auroc_sd: Optional[float] = None
    aupr_mean: Optional[float] = None
    aupr_sd: Optional[float] = None
    val_mse_mean: float
    val_mse_sd: float


class ExperimentResult(BaseModel):
    task: str
    runs: list[RunResult] = Field(default_factory=list)
    aggregate: list[AggregateRow] = Field(default_factory=list)
    failures: list[RunFailure] = Field(default_factory=list)
    provenance: dict = Field(default_factory=dict)
