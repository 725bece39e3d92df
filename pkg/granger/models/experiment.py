"""Validated experiment configuration.

Every config is a pydantic model so that a malformed JSON file reports every
violated field at once. ``lambda`` is a Python keyword; the attribute is
``lam`` and the JSON key stays ``lambda``.
"""

import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ModelKind = Literal["VAR", "LeKVAR", "cMLP", "cMLPwF", "cLSTM", "cLSTMwF"]
PenaltyKind = Literal["GroupLasso", "SparseGroupLasso", "HierarchicalGroupLasso", "DecoupledL1"]
TaskKind = Literal["var3", "lorenz96", "replicated-panel", "csv-panel", "sliding-window"]

MODEL_KINDS = ("VAR", "LeKVAR", "cMLP", "cMLPwF", "cLSTM", "cLSTMwF")
_SMALL_SUFFIX = "_s"

DEFAULT_HIDDEN = [10, 10]
SMALL_HIDDEN = [10]
KERNEL_HIDDEN = 10

DEFAULT_LR_GRID = [1.0, 0.1, 0.01, 0.001, 0.0001]
DEFAULT_LAMBDA_GRID = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
DEFAULT_MAX_LAG = 5
REPLICATED_PANEL_EPOCHS = 1000
REPLICATED_PANEL_MAX_LAG = 2
SLIDING_WINDOW_DEFAULTS = {
    "models": ["cMLPwF"],
    "max_lag": 3,
    "lr_grid": [0.001, 0.01],
    "lambda_grid": [1e-5, 1e-4, 1e-3, 1e-2],
    "scale": True,
}


def parse_model_name(name: str) -> tuple[str, bool]:
    """
    Split a model name such as ``"cMLPwF_s"`` into (kind, small).

    Raises:
        ValueError: If the base kind is unknown or a joint model is marked small.
    """
    small = name.endswith(_SMALL_SUFFIX)
    kind = name[: -len(_SMALL_SUFFIX)] if small else name
    if kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind '{name}'. Available: {list(MODEL_KINDS)}")
    if small and kind in ("VAR", "LeKVAR"):
        raise ValueError(f"'{name}': only component-wise kinds have a small variant")
    return kind, small


class ModelConfig(BaseModel):
    """Architecture of one forecaster."""

    model_config = ConfigDict(extra="forbid")

    kind: ModelKind
    num_series: int = Field(..., ge=1, description="p")
    max_lag: int = Field(..., ge=1, description="K")
    target_index: Optional[int] = Field(None, ge=0, description="Target series i (component-wise kinds only)")
    hidden_layers: Optional[list[int]] = Field(None, description="Hidden widths; None = kind default")
    small: bool = False
    activation: Literal["sigmoid"] = "sigmoid"
    normalize_groups: bool = Field(True, description="Use first-layer groups in unit-norm form (wF kinds)")
    kernel_mode: Literal["learned", "identity"] = "learned"

    @field_validator("hidden_layers")
    @classmethod
    def _positive_widths(cls, widths: Optional[list[int]]) -> Optional[list[int]]:
        if widths is not None:
            if not widths:
                raise ValueError("hidden_layers must not be empty")
            if any(w < 1 for w in widths):
                raise ValueError(f"hidden widths must be positive, got {widths}")
        return widths

    @model_validator(mode="after")
    def _check_target(self) -> "ModelConfig":
        if self.is_component:
            if self.target_index is None:
                raise ValueError(f"{self.kind} needs a target_index")
            if self.target_index >= self.num_series:
                raise ValueError(
                    f"target_index {self.target_index} out of range for {self.num_series} series"
                )
        elif self.target_index is not None:
            raise ValueError(f"{self.kind} predicts all series jointly; target_index must be absent")
        return self

    @property
    def is_component(self) -> bool:
        return self.kind not in ("VAR", "LeKVAR")

    @property
    def is_recurrent(self) -> bool:
        return self.kind.startswith("cLSTM")

    @property
    def is_decoupled(self) -> bool:
        return self.kind.endswith("wF")

    @property
    def name(self) -> str:
        return self.kind + (_SMALL_SUFFIX if self.small else "")

    @property
    def resolved_hidden(self) -> list[int]:
        if self.hidden_layers is not None:
            return list(self.hidden_layers)
        if not self.is_component:
            return [KERNEL_HIDDEN]
        return list(SMALL_HIDDEN if self.small else DEFAULT_HIDDEN)


class PenaltyConfig(BaseModel):
    """Structured sparsity penalty and its strength."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: PenaltyKind = "GroupLasso"
    lam: float = Field(0.0, ge=0.0, alias="lambda")
    alpha: Optional[float] = Field(None, gt=0.0, lt=1.0)
    lambda_q: Optional[float] = Field(None, ge=0.0, description="Lag-factor strength; defaults to lambda")

    @model_validator(mode="after")
    def _check_alpha(self) -> "PenaltyConfig":
        if self.kind == "SparseGroupLasso" and self.alpha is None:
            raise ValueError("SparseGroupLasso needs alpha in (0, 1)")
        if self.kind != "SparseGroupLasso" and self.alpha is not None:
            raise ValueError(f"alpha is only valid for SparseGroupLasso, not {self.kind}")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    epochs: int = Field(200, ge=0)
    batch_size: int = Field(1024, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    lam: float = Field(0.0, ge=0.0, alias="lambda")
    adam_beta1: float = Field(0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = 0


class ExperimentConfig(BaseModel):
    """Full description of a batch experiment (one JSON file)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    task: TaskKind
    # synthetic tasks
    num_series: int = Field(10, ge=1)
    num_steps: int = Field(1000, ge=2)
    max_lag: int = Field(DEFAULT_MAX_LAG, ge=1)
    recurrent_max_lag: Optional[int] = Field(None, ge=1, description="Window length for cLSTM kinds; None = max_lag")
    causal_lags: list[int] = Field(default_factory=lambda: [1, 2, 3])
    density: float = Field(0.2, gt=0.0, le=1.0)
    var_coeff: Optional[float] = Field(None, ge=0.0, description="VAR coefficient magnitude; None = stability edge")
    var_noise_sd: float = Field(0.1, ge=0.0)
    forcing: float = 20.0
    dt_record: float = Field(0.05, gt=0.0)
    # file-based tasks
    panel_path: Optional[str] = None
    truth_path: Optional[str] = None
    sampling_rate: Optional[float] = Field(None, gt=0.0)
    window_len: int = Field(2000, ge=2)
    overlap: float = Field(0.5, ge=0.0, lt=1.0)
    train_fraction: float = Field(0.75, gt=0.0, lt=1.0)
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    # models and search
    models: list[str] = Field(default_factory=lambda: ["VAR"], min_length=1)
    lr_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_LR_GRID), min_length=1)
    lambda_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID), min_length=1)
    train: TrainConfig = Field(default_factory=TrainConfig)
    penalty: PenaltyConfig = Field(default_factory=PenaltyConfig)
    scale: bool = False
    exclude_diagonal: bool = False
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: str = "results"
    mlflow_uri: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _task_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        if data.get("task") == "replicated-panel":
            train = dict(data.get("train") or {})
            train.setdefault("epochs", REPLICATED_PANEL_EPOCHS)
            data = {**data, "train": train}
            if "max_lag" not in data:
                # short replicates: non-recurrent kinds look back two steps, cLSTM keeps the usual window
                data = {"recurrent_max_lag": DEFAULT_MAX_LAG, **data, "max_lag": REPLICATED_PANEL_MAX_LAG}
        elif data.get("task") == "sliding-window":
            data = {**SLIDING_WINDOW_DEFAULTS, **data}
        return data

    @field_validator("models")
    @classmethod
    def _known_models(cls, models: list[str]) -> list[str]:
        for name in models:
            parse_model_name(name)
        return models

    @field_validator("lr_grid")
    @classmethod
    def _positive_lrs(cls, grid: list[float]) -> list[float]:
        if any(lr <= 0 for lr in grid):
            raise ValueError(f"learning rates must be positive, got {grid}")
        return grid

    @field_validator("lambda_grid")
    @classmethod
    def _nonnegative_lambdas(cls, grid: list[float]) -> list[float]:
        if any(lam < 0 for lam in grid):
            raise ValueError(f"lambda values must be nonnegative, got {grid}")
        return grid

    @model_validator(mode="after")
    def _check_task(self) -> "ExperimentConfig":
        problems = []
        if self.task in ("replicated-panel", "csv-panel", "sliding-window"):
            if self.panel_path is None:
                problems.append(f"panel_path is required for task {self.task}")
            elif not os.path.exists(self.panel_path):
                problems.append(f"panel_path does not exist: {self.panel_path}")
        if self.truth_path is not None and not os.path.exists(self.truth_path):
            problems.append(f"truth_path does not exist: {self.truth_path}")
        if self.task == "var3" and any(k < 1 or k > self.max_lag for k in self.causal_lags):
            problems.append(f"causal_lags {self.causal_lags} must lie in 1..{self.max_lag}")
        if self.task == "lorenz96" and self.num_series < 4:
            problems.append("lorenz96 needs num_series >= 4")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def lag_for(self, name: str) -> int:
        """Window length K used for model ``name``."""
        kind, _ = parse_model_name(name)
        if kind.startswith("cLSTM") and self.recurrent_max_lag is not None:
            return self.recurrent_max_lag
        return self.max_lag
