"""Tests for granger/services/autodiff.py — primitives, tape, backward, grad_check.

Covers:
  - forward values of the primitive set, including the shape rules
  - reverse-mode gradients against hand-derived values
  - fan-out accumulation and usage errors of backward
  - grad_check at smooth points and its probe-region error
  - an optional cross-check against torch autograd
"""

import threading

import numpy as np
import pytest

from granger.core.errors import DimensionError, NumericError, UsageError
from granger.services import autodiff
from granger.services.autodiff import Graph, Tensor, as_tensor, backward


def _grad_of(function, values):
    """Gradient of a scalar ``function`` at ``values``."""
    x = Tensor(values, requires_grad=True)
    with Graph() as graph:
        out = function(x)
    backward(graph, out)
    return x.grad


# ---------------------------------------------------------------------------
# Forward evaluation
# ---------------------------------------------------------------------------


class TestPrimitiveForward:
    def test_sigmoid_at_zero_is_half(self):
        assert autodiff.sigmoid(Tensor([0.0])).values.tolist() == [0.5]

    def test_tanh_at_zero_is_zero(self):
        assert autodiff.tanh(Tensor([0.0])).values.tolist() == [0.0]

    def test_matmul_identity(self):
        out = autodiff.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
        assert out.values.tolist() == [[3.0], [4.0]]

    def test_group_norm_of_three_four_is_five(self):
        assert autodiff.norm(Tensor([3.0, 4.0])).item() == 5.0

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = autodiff.sigmoid(Tensor([-800.0, 800.0])).values
        assert out[0] == 0.0
        assert out[1] == 1.0

    def test_bias_row_broadcasts_over_batch(self):
        out = autodiff.add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0]))
        assert out.values.tolist() == [[1.0, 2.0]] * 3

    def test_normalize_passes_zero_vector_through(self):
        out = autodiff.normalize(Tensor([[3.0, 4.0], [0.0, 0.0]])).values
        assert np.allclose(out, [[0.6, 0.8], [0.0, 0.0]])

    def test_row_norms(self):
        out = autodiff.row_norms(Tensor([[3.0, 4.0], [0.0, 2.0]]))
        assert out.values.tolist() == [5.0, 2.0]

    def test_mse(self):
        out = autodiff.mse(Tensor([1.0, 3.0]), Tensor([0.0, 0.0]))
        assert out.item() == 5.0

    def test_concat_take_reshape_transpose(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        joined = autodiff.concat([a, a], axis=0)
        assert joined.shape == (4, 3)
        assert autodiff.take(joined, 1, 3, axis=0).values.tolist() == [[3.0, 4.0, 5.0], [0.0, 1.0, 2.0]]
        assert autodiff.reshape(a, (3, 2)).shape == (3, 2)
        assert autodiff.transpose(a).values.tolist() == [[0.0, 3.0], [1.0, 4.0], [2.0, 5.0]]

    def test_primitive_set_is_closed(self):
        assert len(autodiff.PRIMITIVES) == 17
        with pytest.raises(ValueError, match="Unknown primitive"):
            autodiff.eval_primitive("softplus", [Tensor([1.0])])


class TestPrimitiveErrors:
    def test_matmul_shape_mismatch_names_primitive(self):
        with pytest.raises(DimensionError) as info:
            autodiff.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert info.value.primitive == "matmul"
        assert (2, 3) in info.value.shapes

    def test_add_rejects_non_suffix_shapes(self):
        with pytest.raises(DimensionError):
            autodiff.add(Tensor(np.ones((3, 2))), Tensor(np.ones(3)))

    def test_reshape_size_mismatch(self):
        with pytest.raises(DimensionError):
            autodiff.reshape(Tensor(np.ones(6)), (4, 2))

    def test_take_out_of_range(self):
        with pytest.raises(DimensionError):
            autodiff.take(Tensor(np.ones(3)), 2, 5)

    def test_non_finite_output_is_numeric_error(self):
        with pytest.raises(NumericError):
            autodiff.scale(Tensor([1e308]), 1e10)

    def test_tensor_rejects_nan(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])

    def test_item_needs_single_element(self):
        with pytest.raises(UsageError):
            Tensor([1.0, 2.0]).item()


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum_of_squares(self):
        grad = _grad_of(lambda w: autodiff.total(autodiff.multiply(w, w)), [1.0, 2.0])
        assert grad.tolist() == [2.0, 4.0]

    def test_sigmoid_derivative_at_zero(self):
        grad = _grad_of(lambda w: autodiff.total(autodiff.sigmoid(w)), [0.0])
        assert grad.tolist() == [0.25]

    def test_norm_gradient(self):
        grad = _grad_of(autodiff.norm, [3.0, 4.0])
        assert np.allclose(grad, [0.6, 0.8])

    def test_norm_gradient_at_zero_is_zero(self):
        grad = _grad_of(autodiff.norm, [0.0, 0.0])
        assert grad.tolist() == [0.0, 0.0]

    def test_fan_out_accumulates(self):
        # f(w) = sum(w) + sum(w * 3) -> grad 4 everywhere
        def f(w):
            return autodiff.add(autodiff.total(w), autodiff.total(autodiff.scale(w, 3.0)))

        assert _grad_of(f, [1.0, -1.0]).tolist() == [4.0, 4.0]

    def test_broadcast_bias_gradient_is_summed(self):
        bias = Tensor([0.0, 0.0], requires_grad=True)
        with Graph() as graph:
            out = autodiff.total(autodiff.add(as_tensor(np.ones((3, 2))), bias))
        backward(graph, out)
        assert bias.grad.tolist() == [3.0, 3.0]

    def test_constants_get_no_gradient(self):
        c = as_tensor([1.0, 2.0])
        w = Tensor([1.0, 1.0], requires_grad=True)
        with Graph() as graph:
            out = autodiff.total(autodiff.multiply(w, c))
        backward(graph, out)
        assert c.grad is None
        assert w.grad.tolist() == [1.0, 2.0]

    def test_leaf_gradients_accumulate_across_calls(self):
        w = Tensor([1.0], requires_grad=True)
        for _ in range(2):
            with Graph() as graph:
                out = autodiff.total(autodiff.scale(w, 2.0))
            backward(graph, out)
        assert w.grad.tolist() == [4.0]
        w.zero_grad()
        assert w.grad is None

    def test_non_scalar_loss_is_usage_error(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as graph:
            out = autodiff.scale(w, 2.0)
        with pytest.raises(UsageError):
            backward(graph, out)

    def test_backward_before_forward_is_usage_error(self):
        with pytest.raises(UsageError):
            backward(Graph(), Tensor(1.0, requires_grad=True))

    def test_no_recording_outside_graph(self):
        w = Tensor([1.0], requires_grad=True)
        graph = Graph()
        autodiff.total(w)
        assert len(graph) == 0

    def test_graphs_are_thread_confined(self):
        seen = {}

        def worker():
            seen["graph"] = autodiff.active_graph()

        with Graph():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen["graph"] is None


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------


class TestGradCheck:
    def test_quadratic_is_exact_to_roundoff(self):
        error = autodiff.grad_check(
            lambda w: autodiff.total(autodiff.multiply(w, w)), Tensor([1.0, 2.0]), step=1e-5
        )
        assert error < 1e-8

    def test_two_layer_sigmoid_mlp(self, rng):
        w2 = as_tensor(rng.uniform(-1, 1, size=(4, 1)))
        x = as_tensor(rng.uniform(-1, 1, size=(5, 3)))
        y = as_tensor(rng.uniform(-1, 1, size=(5, 1)))

        def loss(w1):
            hidden = autodiff.sigmoid(autodiff.matmul(x, w1))
            return autodiff.mse(autodiff.matmul(hidden, w2), y)

        point = Tensor(rng.uniform(-1, 1, size=(3, 4)))
        assert autodiff.grad_check(loss, point, step=1e-5) < 1e-5

    @pytest.mark.parametrize("name", ["normalize", "row_norms", "tanh", "slice", "concat", "mse"])
    def test_primitive_cases(self, name):
        from granger.services.experiment_service import _primitive_cases

        function, shape = _primitive_cases(np.random.default_rng(7))[name]
        point = Tensor(np.random.default_rng(8).uniform(-2, 2, size=shape))
        assert autodiff.grad_check(function, point) < 1e-5

    def test_non_finite_probe_is_numeric_error(self):
        def blows_up(w):
            return autodiff.total(autodiff.scale(w, 1e305))

        with pytest.raises(NumericError):
            autodiff.grad_check(blows_up, Tensor([1e4]), step=1.0)

    def test_step_must_be_positive(self):
        with pytest.raises(UsageError):
            autodiff.grad_check(autodiff.total, Tensor([1.0]), step=0.0)


# ---------------------------------------------------------------------------
# Cross-check against torch
# ---------------------------------------------------------------------------


class TestAgainstTorch:
    def test_lstm_like_expression_matches_torch(self, rng):
        torch = pytest.importorskip("torch")
        a_np = rng.uniform(-1, 1, size=(4, 6))
        b_np = rng.uniform(-1, 1, size=(6, 3))
        t_np = rng.uniform(-1, 1, size=(4, 3))

        a = Tensor(a_np, requires_grad=True)
        b = Tensor(b_np, requires_grad=True)
        with Graph() as graph:
            z = autodiff.matmul(a, b)
            h = autodiff.multiply(autodiff.sigmoid(z), autodiff.tanh(z))
            loss = autodiff.add(autodiff.mse(h, as_tensor(t_np)), autodiff.norm(autodiff.normalize(b)))
        backward(graph, loss)

        ta = torch.tensor(a_np, requires_grad=True)
        tb = torch.tensor(b_np, requires_grad=True)
        tz = ta @ tb
        th = torch.sigmoid(tz) * torch.tanh(tz)
        tnormed = tb / tb.norm(dim=-1, keepdim=True)
        tloss = ((th - torch.tensor(t_np)) ** 2).mean() + tnormed.norm()
        tloss.backward()

        assert abs(loss.item() - tloss.item()) < 1e-10
        assert np.allclose(a.grad, ta.grad.numpy(), atol=1e-10)
        assert np.allclose(b.grad, tb.grad.numpy(), atol=1e-10)
