"""
Reverse-mode automatic differentiation over dense float64 arrays.

Forward evaluation goes through ``eval_primitive``: each primitive is a
(forward, backward) pair registered in ``_PRIMITIVES``. While a ``Graph`` is
active on the current thread, every primitive whose inputs require a gradient
appends a node to it. ``backward(graph, loss)`` then walks the nodes in exact
reverse order, accumulating gradients additively across fan-out.

    with Graph() as graph:
        loss = mse(x @ w + b, y)
    backward(graph, loss)
    w.grad  # dloss/dw

The primitive set is closed. Shapes follow fixed rules, the only broadcast
being the trailing-suffix rule of the elementwise binary primitives (an
operand whose shape equals the trailing dimensions of the other, e.g. a bias
row added to a batch).
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from granger.core.errors import DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

EPS_NORM = 1e-12

_state = threading.local()


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None) -> None:
        array = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"tensor {name or ''} contains non-finite values".strip())
        self.values: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar over the primitive set.

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def as_tensor(value) -> Tensor:
    """Wrap an array-like as a constant (non-differentiable) tensor."""
    return _lift(value)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple  # node ids (None for constants)
    output: Tensor
    input_values: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


class Graph:
    """
    Topologically ordered tape of primitive evaluations.

    Nodes are appended as primitives run, so every node's inputs precede it.
    A graph is confined to the thread that created it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, tensor: Tensor) -> Optional[int]:
        return self._index.get(id(tensor))

    def _leaf(self, tensor: Tensor) -> int:
        existing = self._index.get(id(tensor))
        if existing is not None:
            return existing
        self.nodes.append(Node(kind="leaf", inputs=(), output=tensor))
        self._index[id(tensor)] = len(self.nodes) - 1
        return len(self.nodes) - 1

    def _record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, cache: dict, attrs: dict) -> None:
        ids = tuple(self._leaf(t) if t.requires_grad else None for t in inputs)
        self.nodes.append(
            Node(
                kind=kind,
                inputs=ids,
                output=output,
                input_values=[t.values for t in inputs],
                cache=cache,
                attrs=attrs,
            )
        )
        self._index[id(output)] = len(self.nodes) - 1


def _graph_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_graph() -> Optional[Graph]:
    stack = _graph_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _binary_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or _is_suffix(b.shape, a.shape):
        return
    raise DimensionError(kind, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the leading axes of ``grad`` so it matches the trailing ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------------------
# Primitive rules: forward(values, attrs) -> (out, cache);
# backward(grad, values, out, cache, attrs) -> tuple of input grads
# ---------------------------------------------------------------------------


def _add_fwd(v, attrs):
    _binary_shape("add", v[0], v[1])
    return v[0] + v[1], {}


def _add_bwd(g, v, out, cache, attrs):
    return g, _reduce_to(g, v[1].shape)


def _sub_fwd(v, attrs):
    _binary_shape("subtract", v[0], v[1])
    return v[0] - v[1], {}


def _sub_bwd(g, v, out, cache, attrs):
    return g, -_reduce_to(g, v[1].shape)


def _mul_fwd(v, attrs):
    _binary_shape("multiply", v[0], v[1])
    return v[0] * v[1], {}


def _mul_bwd(g, v, out, cache, attrs):
    return g * v[1], _reduce_to(g * v[0], v[1].shape)


def _scale_fwd(v, attrs):
    return v[0] * attrs["factor"], {}


def _scale_bwd(g, v, out, cache, attrs):
    return (g * attrs["factor"],)


def _matmul_fwd(v, attrs):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return a @ b, {}


def _matmul_bwd(g, v, out, cache, attrs):
    a, b = v
    return g @ b.T, a.T @ g


def _sigmoid_fwd(v, attrs):
    x = v[0]
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)), {}


def _sigmoid_bwd(g, v, out, cache, attrs):
    return (g * out * (1.0 - out),)


def _tanh_fwd(v, attrs):
    return np.tanh(v[0]), {}


def _tanh_bwd(g, v, out, cache, attrs):
    return (g * (1.0 - out * out),)


def _norm_fwd(v, attrs):
    n = np.sqrt(np.sum(v[0] * v[0]))
    return np.asarray(n), {"norm": float(n)}


def _norm_bwd(g, v, out, cache, attrs):
    n = cache["norm"]
    if n == 0.0:
        return (np.zeros_like(v[0]),)
    return (g * v[0] / n,)


def _row_norms_fwd(v, attrs):
    a = v[0]
    if a.ndim != 2:
        raise DimensionError("row_norms", a.shape)
    return np.sqrt(np.sum(a * a, axis=1)), {}


def _row_norms_bwd(g, v, out, cache, attrs):
    safe = np.where(out > 0.0, out, 1.0)
    factor = np.where(out > 0.0, g / safe, 0.0)
    return (v[0] * factor[:, None],)


def _normalize_fwd(v, attrs):
    a = v[0]
    if a.ndim == 0:
        raise DimensionError("normalize", a.shape)
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    active = norms > EPS_NORM
    out = np.where(active, a / np.where(active, norms, 1.0), a)
    return out, {"norms": norms, "active": active}


def _normalize_bwd(g, v, out, cache, attrs):
    norms, active = cache["norms"], cache["active"]
    dot = np.sum(out * g, axis=-1, keepdims=True)
    projected = (g - out * dot) / np.where(active, norms, 1.0)
    return (np.where(active, projected, g),)


def _abs_fwd(v, attrs):
    return np.abs(v[0]), {}


def _abs_bwd(g, v, out, cache, attrs):
    return (g * np.sign(v[0]),)


def _sum_fwd(v, attrs):
    return np.asarray(np.sum(v[0])), {}


def _sum_bwd(g, v, out, cache, attrs):
    return (np.full_like(v[0], float(g)),)


def _mse_fwd(v, attrs):
    pred, target = v
    if pred.shape != target.shape:
        raise DimensionError("mse", pred.shape, target.shape)
    if pred.size == 0:
        raise DimensionError("mse", pred.shape, target.shape)
    diff = pred - target
    return np.asarray(np.mean(diff * diff)), {"diff": diff}


def _mse_bwd(g, v, out, cache, attrs):
    diff = cache["diff"]
    grad = g * 2.0 * diff / diff.size
    return grad, -grad


def _concat_fwd(v, attrs):
    axis = attrs["axis"]
    try:
        return np.concatenate(v, axis=axis), {}
    except ValueError:
        raise DimensionError("concat", *[a.shape for a in v]) from None


def _concat_bwd(g, v, out, cache, attrs):
    axis = attrs["axis"]
    bounds = np.cumsum([a.shape[axis] for a in v])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_fwd(v, attrs):
    a = v[0]
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if a.ndim == 0 or not (0 <= start < stop <= a.shape[axis]):
        raise DimensionError(f"slice[{start}:{stop}] axis {axis}", a.shape)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return a[tuple(index)], {"index": tuple(index)}


def _slice_bwd(g, v, out, cache, attrs):
    full = np.zeros_like(v[0])
    full[cache["index"]] = g
    return (full,)


def _reshape_fwd(v, attrs):
    a = v[0]
    shape = attrs["shape"]
    if int(np.prod(shape)) != a.size:
        raise DimensionError("reshape", a.shape, shape)
    return a.reshape(shape), {}


def _reshape_bwd(g, v, out, cache, attrs):
    return (g.reshape(v[0].shape),)


def _transpose_fwd(v, attrs):
    a = v[0]
    if a.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return a.T.copy(), {}


def _transpose_bwd(g, v, out, cache, attrs):
    return (g.T,)


_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "subtract": (_sub_fwd, _sub_bwd),
    "multiply": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "norm": (_norm_fwd, _norm_bwd),
    "row_norms": (_row_norms_fwd, _row_norms_bwd),
    "normalize": (_normalize_fwd, _normalize_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mse": (_mse_fwd, _mse_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
}

PRIMITIVES = tuple(_PRIMITIVES)


def eval_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """
    Evaluate primitive ``kind`` on ``inputs`` and record it on the active graph.

    Raises:
        DimensionError: operand shapes violate the primitive's shape rule.
        NumericError: the output contains NaN or Inf.
    """
    rule = _PRIMITIVES.get(kind)
    if rule is None:
        raise ValueError(f"Unknown primitive '{kind}'. Available: {list(_PRIMITIVES)}")
    forward, _ = rule
    values = [t.values for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out_values, cache = forward(values, attrs)
    out_values = np.asarray(out_values, dtype=np.float64)
    if not np.all(np.isfinite(out_values)):
        raise NumericError(f"{kind} produced non-finite values")

    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_values, requires_grad)
    graph = active_graph()
    if graph is not None and requires_grad:
        graph._record(kind, inputs, out, cache, attrs)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """
    Fill ``grad`` of every gradient-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate onto whatever is already stored, so callers
    reset them (``Tensor.zero_grad``) between steps.

    Raises:
        UsageError: ``loss`` is not a scalar produced on ``graph``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    start = graph.node_id(loss)
    if start is None or graph.nodes[start].kind == "leaf":
        raise UsageError("backward called before a forward pass recorded the loss on this graph")

    pending: dict[int, np.ndarray] = {start: np.ones_like(loss.values)}
    for idx in range(start, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = graph.nodes[idx]
        if node.kind == "leaf":
            tensor = node.output
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        node.output.grad = g
        _, rule = _PRIMITIVES[node.kind]
        grads = rule(g, node.input_values, node.output.values, node.cache, node.attrs)
        for input_id, input_grad in zip(node.inputs, grads):
            if input_id is None:
                continue
            if input_id in pending:
                pending[input_id] = pending[input_id] + input_grad
            else:
                pending[input_id] = input_grad


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return eval_primitive("add", [a, b])


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return eval_primitive("subtract", [a, b])


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return eval_primitive("multiply", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return eval_primitive("scale", [a], factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return eval_primitive("matmul", [a, b])


def sigmoid(a: Tensor) -> Tensor:
    return eval_primitive("sigmoid", [a])


def tanh(a: Tensor) -> Tensor:
    return eval_primitive("tanh", [a])


def norm(a: Tensor) -> Tensor:
    """L2 norm of every element of ``a`` (the group norm)."""
    return eval_primitive("norm", [a])


def row_norms(a: Tensor) -> Tensor:
    """L2 norm of each row of a 2-D tensor."""
    return eval_primitive("row_norms", [a])


def normalize(a: Tensor) -> Tensor:
    """Scale each slice along the last axis to unit L2 norm (slices at ~0 pass through)."""
    return eval_primitive("normalize", [a])


def absolute(a: Tensor) -> Tensor:
    return eval_primitive("abs", [a])


def total(a: Tensor) -> Tensor:
    return eval_primitive("sum", [a])


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return eval_primitive("mse", [pred, target])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return eval_primitive("concat", list(tensors), axis=axis)


def take(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    return eval_primitive("slice", [a], start=int(start), stop=int(stop), axis=axis)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return eval_primitive("reshape", [a], shape=tuple(int(s) for s in shape))


def transpose(a: Tensor) -> Tensor:
    return eval_primitive("transpose", [a])


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _probe(function: Callable[[Tensor], Tensor], values: np.ndarray) -> float:
    try:
        out = function(Tensor(values))
    except NumericError as exc:
        raise NumericError(f"non-finite function value in the probe region: {exc}") from exc
    result = out.item()
    if not np.isfinite(result):
        raise NumericError("non-finite function value in the probe region")
    return result


def grad_check(function: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """
    Compare reverse-mode gradients of ``function`` at ``point`` with central differences.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise UsageError(f"grad_check step must be positive, got {step}")
    x = Tensor(point.values.copy(), requires_grad=True)
    with Graph() as graph:
        out = function(x)
    backward(graph, out)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad
    analytic = analytic.reshape(-1)

    base = point.values.astype(np.float64).reshape(-1)
    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += step
        minus[i] -= step
        f_plus = _probe(function, plus.reshape(point.shape))
        f_minus = _probe(function, minus.reshape(point.shape))
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    logger.debug("grad_check: %d coordinates, max relative error %.3e", base.size, worst)
    return worst
