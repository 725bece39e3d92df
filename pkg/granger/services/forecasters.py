"""
Forecasting model families whose input weights carry Granger-causal structure.

Every model maps a batch of lag windows ``inputs`` of shape (N, K, p), with
``inputs[n, k]`` holding x_{t-k-1} (row 0 = most recent lag), to predictions
of shape (N, len(targets)):

* ``VAR`` / ``LeKVAR`` predict all p series jointly; LeKVAR passes every lagged
  value through one shared scalar kernel network before the linear map.
* ``cMLP`` / ``cLSTM`` are component-wise: one network per target series i.
* The ``wF`` variants multiply input x_{t-k,j} by v_j * q_k, and the penalty
  sees only v and q. Their first-layer groups are used in unit-norm form.

Parameter layout (the penalized groups are contiguous slices):

    VAR / LeKVAR   A        (p, p, K)   A[i, j, k] = A^{(k+1)}_{ij}
    cMLP           W1       (p, K, h1)  W1[j, k] = group (j, lag k+1)
    cLSTM          Wx1      (p, 4*h1)   row j = input projection of all four gates
    wF             v (p,), q (K,)
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from granger.core.errors import ConfigError, DimensionError
from granger.core.seeding import rng_stream
from granger.models.experiment import ModelConfig, parse_model_name
from granger.services import storage_service
from granger.services.autodiff import (
    EPS_NORM,
    Tensor,
    add,
    as_tensor,
    grad_check,
    matmul,
    mse,
    multiply,
    normalize,
    reshape,
    sigmoid,
    take,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

_CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class VarParams:
    A: np.ndarray     # (K, p, p); A[k] = A^{(k+1)}
    bias: np.ndarray  # (p,)


@dataclass
class LeKVarParams:
    A: np.ndarray                                # (K, p, p)
    bias: np.ndarray                             # (p,)
    kernel: dict = field(default_factory=dict)   # kernel_w1 (1, H), kernel_b1 (H,), kernel_w2 (1, H), kernel_b2 (1,)


@dataclass
class ComponentNetParams:
    target_index: int
    num_series: int
    max_lag: int
    hidden_layers: list[int]
    weights: dict = field(default_factory=dict)  # every parameter except v and q


@dataclass
class DecouplingFactors:
    v: np.ndarray  # (p,) series importances, unconstrained
    q: np.ndarray  # (K,) lag importances, unconstrained


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Base class
# ---------------------------------------------------------------------------


class Forecaster:
    """Common parameter handling for every model family."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        unit = 0 if config.target_index is None else config.target_index + 1
        self._init_params(rng_stream(self.seed, "weights", unit))

    def _init_params(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _param(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True, name=name)

    @property
    def num_series(self) -> int:
        return self.config.num_series

    @property
    def max_lag(self) -> int:
        return self.config.max_lag

    @property
    def targets(self) -> list[int]:
        if self.config.is_component:
            return [self.config.target_index]
        return list(range(self.num_series))

    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim == 2:
            inputs = inputs[None]
        expected = (self.max_lag, self.num_series)
        if inputs.ndim != 3 or inputs.shape[1:] != expected:
            raise DimensionError(f"{self.config.kind} forward", inputs.shape, ("N",) + expected)
        return inputs

    def forward(self, inputs: np.ndarray) -> Tensor:
        raise NotImplementedError

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return self.forward(inputs).numpy()

    def penalized_groups(self) -> dict[str, Tensor]:
        """
        Weight groups the sparsity penalty acts on.

        Grouped kinds return tensors of shape (G, L, m): G groups, each split
        into L lag subgroups of m weights. wF kinds return ``v`` and ``q``.
        """
        raise NotImplementedError

    def lag_subgroups(self) -> Optional[int]:
        """Number of lag subgroups per penalized group, or None without lag structure."""
        return self.max_lag

    def post_step(self) -> None:
        """Projection applied after every optimizer step."""

    def series_scores(self) -> np.ndarray:
        """(len(targets), p) nonnegative evidence that series j drives each target."""
        raise NotImplementedError

    def lag_scores(self) -> Optional[np.ndarray]:
        """(len(targets), K) nonnegative lag importances, or None."""
        return None

    def copy(self) -> "Forecaster":
        clone = copy.copy(self)
        clone.params = {name: tensor.copy() for name, tensor in self.params.items()}
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        """
        Replace parameter values.

        Raises:
            ConfigError: If a name is missing or unknown.
            DimensionError: If an array has the wrong shape.
        """
        missing = set(self.params) - set(arrays)
        unknown = set(arrays) - set(self.params)
        if missing or unknown:
            raise ConfigError(
                f"{self.config.kind} parameters mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}"
            )
        for name, values in arrays.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != self.params[name].shape:
                raise DimensionError(f"load {name}", values.shape, self.params[name].shape)
            self.params[name] = Tensor(values, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Joint linear models
# ---------------------------------------------------------------------------


class VARModel(Forecaster):
    def _init_params(self, rng: np.random.Generator) -> None:
        p, K = self.num_series, self.max_lag
        self._param("A", _uniform(rng, (p, p, K), p * K))
        self._param("bias", _uniform(rng, (p,), p * K))

    def _flat_inputs(self, inputs: np.ndarray) -> np.ndarray:
        # column j*K + k holds x_{t-k-1, j}, matching reshape(A, (p, p*K))
        n = inputs.shape[0]
        return inputs.transpose(0, 2, 1).reshape(n, self.num_series * self.max_lag)

    def _coefficients(self) -> Tensor:
        p, K = self.num_series, self.max_lag
        return transpose(reshape(self.params["A"], (p, p * K)))

    def _lag_features(self, flat: np.ndarray) -> Tensor:
        return as_tensor(flat)

    def forward(self, inputs: np.ndarray) -> Tensor:
        inputs = self._check_inputs(inputs)
        features = self._lag_features(self._flat_inputs(inputs))
        return add(matmul(features, self._coefficients()), self.params["bias"])

    def penalized_groups(self) -> dict[str, Tensor]:
        p, K = self.num_series, self.max_lag
        return {"A": reshape(self.params["A"], (p * p, K, 1))}

    def series_scores(self) -> np.ndarray:
        return np.linalg.norm(self.params["A"].values, axis=2)

    def lag_scores(self) -> np.ndarray:
        return np.linalg.norm(self.params["A"].values, axis=1)

    def var_params(self) -> VarParams:
        return VarParams(
            A=np.transpose(self.params["A"].values, (2, 0, 1)).copy(),
            bias=self.params["bias"].numpy(),
        )

    @classmethod
    def from_params(cls, params: VarParams, seed: int = 0) -> "VARModel":
        K, p, _ = np.shape(params.A)
        model = cls(ModelConfig(kind="VAR", num_series=p, max_lag=K), seed=seed)
        model.load_state_dict({"A": np.transpose(params.A, (1, 2, 0)), "bias": params.bias})
        return model


class LeKVARModel(VARModel):
    """VAR whose lagged values first pass through one shared scalar kernel."""

    def _init_params(self, rng: np.random.Generator) -> None:
        super()._init_params(rng)
        if self.config.kernel_mode == "identity":
            return
        width = self.config.resolved_hidden[0]
        self._param("kernel_w1", _uniform(rng, (1, width), 1))
        self._param("kernel_b1", _uniform(rng, (width,), 1))
        w2 = _uniform(rng, (1, width), width)
        self._param("kernel_w2", w2 / np.linalg.norm(w2))
        self._param("kernel_b2", _uniform(rng, (1,), width))

    def kernel(self, values: Tensor) -> Tensor:
        """Apply the kernel to a column tensor of shape (M, 1)."""
        if self.config.kernel_mode == "identity":
            return values
        hidden = sigmoid(add(matmul(values, self.params["kernel_w1"]), self.params["kernel_b1"]))
        readout = transpose(normalize(self.params["kernel_w2"]))
        return add(matmul(hidden, readout), self.params["kernel_b2"])

    def kernel_values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.kernel(as_tensor(x.reshape(-1, 1))).values.reshape(x.shape)

    def _lag_features(self, flat: np.ndarray) -> Tensor:
        if self.config.kernel_mode == "identity":
            return as_tensor(flat)
        transformed = self.kernel(as_tensor(flat.reshape(-1, 1)))
        return reshape(transformed, flat.shape)

    def post_step(self) -> None:
        if "kernel_w2" not in self.params:
            return
        w2 = self.params["kernel_w2"].values
        n = np.linalg.norm(w2)
        if n > EPS_NORM:
            w2 /= n

    def lekvar_params(self) -> LeKVarParams:
        base = self.var_params()
        kernel = {name: t.numpy() for name, t in self.params.items() if name.startswith("kernel_")}
        return LeKVarParams(A=base.A, bias=base.bias, kernel=kernel)

    @classmethod
    def from_params(cls, params: LeKVarParams, seed: int = 0) -> "LeKVARModel":
        K, p, _ = np.shape(params.A)
        mode = "learned" if params.kernel else "identity"
        hidden = [np.shape(params.kernel["kernel_w1"])[1]] if params.kernel else None
        config = ModelConfig(kind="LeKVAR", num_series=p, max_lag=K, kernel_mode=mode, hidden_layers=hidden)
        model = cls(config, seed=seed)
        arrays = {"A": np.transpose(params.A, (1, 2, 0)), "bias": params.bias, **params.kernel}
        model.load_state_dict(arrays)
        return model


# ---------------------------------------------------------------------------
# Component-wise networks
# ---------------------------------------------------------------------------


class _ComponentNet(Forecaster):
    def _init_factors(self) -> None:
        if self.config.is_decoupled:
            self._param("v", np.ones(self.num_series))
            self._param("q", np.ones(self.max_lag))

    def _factor_matrix(self) -> Tensor:
        """F[j, k] = v_j * q_k, shape (p, K)."""
        p, K = self.num_series, self.max_lag
        return matmul(reshape(self.params["v"], (p, 1)), reshape(self.params["q"], (1, K)))

    def _use_normalized(self) -> bool:
        return self.config.is_decoupled and self.config.normalize_groups

    def lag_subgroups(self) -> Optional[int]:
        return None if self.config.is_decoupled else self.max_lag

    def _readout(self, hidden: Tensor) -> Tensor:
        return add(matmul(hidden, self.params["W_out"]), self.params["b_out"])

    def component_params(self) -> ComponentNetParams:
        weights = {n: t.numpy() for n, t in self.params.items() if n not in ("v", "q")}
        return ComponentNetParams(
            target_index=self.config.target_index,
            num_series=self.num_series,
            max_lag=self.max_lag,
            hidden_layers=self.config.resolved_hidden,
            weights=weights,
        )

    def factors(self) -> Optional[DecouplingFactors]:
        if not self.config.is_decoupled:
            return None
        return DecouplingFactors(v=self.params["v"].numpy(), q=self.params["q"].numpy())

    def penalized_groups(self) -> dict[str, Tensor]:
        if self.config.is_decoupled:
            return {"v": self.params["v"], "q": self.params["q"]}
        return self._input_groups()

    def _input_groups(self) -> dict[str, Tensor]:
        raise NotImplementedError


class ComponentMLP(_ComponentNet):
    def _init_params(self, rng: np.random.Generator) -> None:
        p, K = self.num_series, self.max_lag
        hidden = self.config.resolved_hidden
        self._param("W1", _uniform(rng, (p, K, hidden[0]), p * K))
        self._param("b1", _uniform(rng, (hidden[0],), p * K))
        for layer, (width_in, width_out) in enumerate(zip(hidden, hidden[1:]), start=2):
            self._param(f"W{layer}", _uniform(rng, (width_in, width_out), width_in))
            self._param(f"b{layer}", _uniform(rng, (width_out,), width_in))
        self._param("W_out", _uniform(rng, (hidden[-1], 1), hidden[-1]))
        self._param("b_out", _uniform(rng, (1,), hidden[-1]))
        self._init_factors()

    def first_layer(self) -> Tensor:
        """W1 as used in the forward pass, (p, K, h1)."""
        w1 = self.params["W1"]
        return normalize(w1) if self._use_normalized() else w1

    def forward(self, inputs: np.ndarray) -> Tensor:
        inputs = self._check_inputs(inputs)
        n = inputs.shape[0]
        p, K = self.num_series, self.max_lag
        hidden = self.config.resolved_hidden

        x = as_tensor(inputs.transpose(0, 2, 1))  # (N, p, K)
        if self.config.is_decoupled:
            x = multiply(x, self._factor_matrix())
        flat = reshape(x, (n, p * K))

        w1 = reshape(self.first_layer(), (p * K, hidden[0]))
        h = sigmoid(add(matmul(flat, w1), self.params["b1"]))
        for layer in range(2, len(hidden) + 1):
            h = sigmoid(add(matmul(h, self.params[f"W{layer}"]), self.params[f"b{layer}"]))
        return self._readout(h)

    def _input_groups(self) -> dict[str, Tensor]:
        return {"W1": self.params["W1"]}

    def series_scores(self) -> np.ndarray:
        if self.config.is_decoupled:
            return np.abs(self.params["v"].values)[None, :]
        w1 = self.params["W1"].values
        return np.sqrt(np.sum(w1 * w1, axis=(1, 2)))[None, :]

    def lag_scores(self) -> np.ndarray:
        if self.config.is_decoupled:
            return np.abs(self.params["q"].values)[None, :]
        w1 = self.params["W1"].values
        return np.sqrt(np.sum(w1 * w1, axis=(0, 2)))[None, :]


class ComponentLSTM(_ComponentNet):
    """Stacked LSTM over the lag window, oldest step first; gate columns ordered i, f, g, o."""

    def _init_params(self, rng: np.random.Generator) -> None:
        hidden = self.config.resolved_hidden
        width_in = self.num_series
        for layer, width in enumerate(hidden, start=1):
            self._param(f"Wx{layer}", _uniform(rng, (width_in, 4 * width), width_in))
            self._param(f"Wh{layer}", _uniform(rng, (width, 4 * width), width))
            self._param(f"b{layer}", _uniform(rng, (4 * width,), width))
            width_in = width
        self._param("W_out", _uniform(rng, (hidden[-1], 1), hidden[-1]))
        self._param("b_out", _uniform(rng, (1,), hidden[-1]))
        self._init_factors()

    def input_projection(self) -> Tensor:
        """Wx1 as used in the forward pass, (p, 4*h1)."""
        wx = self.params["Wx1"]
        return normalize(wx) if self._use_normalized() else wx

    def _cell(self, layer: int, x: Tensor, h: Tensor, c: Tensor, wx: Tensor) -> tuple[Tensor, Tensor]:
        width = self.config.resolved_hidden[layer - 1]
        gates = add(add(matmul(x, wx), matmul(h, self.params[f"Wh{layer}"])), self.params[f"b{layer}"])
        i = sigmoid(take(gates, 0, width, axis=1))
        f = sigmoid(take(gates, width, 2 * width, axis=1))
        g = tanh(take(gates, 2 * width, 3 * width, axis=1))
        o = sigmoid(take(gates, 3 * width, 4 * width, axis=1))
        c = add(multiply(f, c), multiply(i, g))
        h = multiply(o, tanh(c))
        return h, c

    def forward(self, inputs: np.ndarray) -> Tensor:
        inputs = self._check_inputs(inputs)
        n = inputs.shape[0]
        p, K = self.num_series, self.max_lag
        hidden = self.config.resolved_hidden

        factor = self._factor_matrix() if self.config.is_decoupled else None
        projections = [self.input_projection()] + [self.params[f"Wx{l}"] for l in range(2, len(hidden) + 1)]
        states = [(as_tensor(np.zeros((n, w))), as_tensor(np.zeros((n, w)))) for w in hidden]

        for k in range(K - 1, -1, -1):
            x = as_tensor(inputs[:, k, :])
            if factor is not None:
                x = multiply(x, reshape(take(factor, k, k + 1, axis=1), (p,)))
            for layer in range(1, len(hidden) + 1):
                h, c = self._cell(layer, x, *states[layer - 1], projections[layer - 1])
                states[layer - 1] = (h, c)
                x = h
        return self._readout(states[-1][0])

    def _input_groups(self) -> dict[str, Tensor]:
        p = self.num_series
        width = self.config.resolved_hidden[0]
        return {"Wx1": reshape(self.params["Wx1"], (p, 1, 4 * width))}

    def lag_subgroups(self) -> Optional[int]:
        return None

    def series_scores(self) -> np.ndarray:
        if self.config.is_decoupled:
            return np.abs(self.params["v"].values)[None, :]
        return np.linalg.norm(self.params["Wx1"].values, axis=1)[None, :]

    def lag_scores(self) -> Optional[np.ndarray]:
        if self.config.is_decoupled:
            return np.abs(self.params["q"].values)[None, :]
        return None


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, type] = {
    "VAR": VARModel,
    "LeKVAR": LeKVARModel,
    "cMLP": ComponentMLP,
    "cMLPwF": ComponentMLP,
    "cLSTM": ComponentLSTM,
    "cLSTMwF": ComponentLSTM,
}


def build_model(config: ModelConfig, seed: int = 0) -> Forecaster:
    """
    Return a freshly initialized forecaster for ``config``.

    Raises:
        ConfigError: If the kind is not registered.
    """
    cls = _REGISTRY.get(config.kind)
    if cls is None:
        raise ConfigError(f"Unknown model kind '{config.kind}'. Available: {list(_REGISTRY.keys())}")
    logger.debug("Model resolved: %s -> %s (target=%s)", config.name, cls.__name__, config.target_index)
    return cls(config, seed=seed)


def model_config(name: str, num_series: int, max_lag: int, target_index: Optional[int] = None, **overrides) -> ModelConfig:
    """Build a ModelConfig from a model name that may carry the ``_s`` suffix."""
    try:
        kind, small = parse_model_name(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ModelConfig(
        kind=kind,
        small=small,
        num_series=num_series,
        max_lag=max_lag,
        target_index=target_index,
        **overrides,
    )


# ---------------------------------------------------------------------------
# Single-window forwards
# ---------------------------------------------------------------------------


def var_forward(params: VarParams, window: np.ndarray) -> np.ndarray:
    """Sum_k A^{(k)} x_{t-k} + bias for one (K, p) window."""
    return VARModel.from_params(params).predict(window)[0]


def lekvar_forward(params: LeKVarParams, window: np.ndarray) -> np.ndarray:
    return LeKVARModel.from_params(params).predict(window)[0]


def component_forward(
    params: ComponentNetParams,
    factors: Optional[DecouplingFactors],
    window: np.ndarray,
    kind: str,
) -> float:
    """
    Prediction of one component network for one (K, p) window.

    Raises:
        ConfigError: If ``kind`` is not component-wise, or factors are given
            to a plain kind, or missing for a wF kind.
    """
    if kind not in ("cMLP", "cMLPwF", "cLSTM", "cLSTMwF"):
        raise ConfigError(f"'{kind}' is not a component-wise model kind")
    decoupled = kind.endswith("wF")
    if factors is not None and not decoupled:
        raise ConfigError(f"decoupling factors supplied to {kind}")
    if factors is None and decoupled:
        raise ConfigError(f"{kind} needs decoupling factors")

    config = ModelConfig(
        kind=kind,
        num_series=params.num_series,
        max_lag=params.max_lag,
        target_index=params.target_index,
        hidden_layers=params.hidden_layers,
    )
    model = build_model(config)
    arrays = dict(params.weights)
    if factors is not None:
        arrays["v"] = factors.v
        arrays["q"] = factors.q
    model.load_state_dict(arrays)
    return float(model.predict(window)[0, 0])


def normalized_group(weights: np.ndarray) -> np.ndarray:
    """w / ||w||_2, or w unchanged when ||w||_2 <= EPS_NORM."""
    weights = np.asarray(weights, dtype=np.float64)
    flat = normalize(as_tensor(weights.reshape(-1)))
    return flat.values.reshape(weights.shape)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Forecaster, path: str) -> None:
    document = {
        "version": _CHECKPOINT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "seed": model.seed,
        "params": {
            name: {"shape": list(tensor.shape), "values": tensor.values.reshape(-1).tolist()}
            for name, tensor in model.params.items()
        },
    }
    storage_service.write_json_atomic(path, document)
    logger.info("Checkpoint written: %s (%s, %d tensors)", path, model.config.name, len(model.params))


def load_checkpoint(path: str) -> Forecaster:
    with open(path, encoding="utf-8") as handle:
        document = json.load(handle)
    config = ModelConfig.model_validate(document["config"])
    model = build_model(config, seed=document.get("seed", 0))
    arrays = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in document["params"].items()
    }
    model.load_state_dict(arrays)
    return model


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def model_grad_check(model: Forecaster, inputs: np.ndarray, targets: np.ndarray, step: float = 1e-5) -> dict[str, float]:
    """
    grad_check of the MSE loss with respect to every parameter tensor.

    Returns:
        parameter name -> max relative error.
    """
    target_tensor = as_tensor(targets)
    errors = {}
    for name, original in list(model.params.items()):

        def loss_of(candidate: Tensor, name: str = name) -> Tensor:
            model.params[name] = candidate
            try:
                return mse(model.forward(inputs), target_tensor)
            finally:
                model.params[name] = original

        errors[name] = grad_check(loss_of, original, step=step)
    return errors
