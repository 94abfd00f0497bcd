"""Unit tests for the autodiff engine: ops, losses, optimizers, gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ame_lab.diffcore import (
    DenseLayer,
    DimensionError,
    GradientError,
    Optimizer,
    Tensor,
    clear_grads,
    finite_difference_grads,
    forward_dense,
    init_dense,
    linear,
    loss_cross_entropy,
    loss_mae,
    optimizer_step,
    per_sample_cross_entropy,
    per_sample_mae,
    relative_gradient_error,
    softmax,
    take_columns,
)


def _layer(weights, bias, activation="identity"):
    return DenseLayer(Tensor(weights, requires_grad=True),
                      Tensor(bias, requires_grad=True), activation)


class TestForwardDense:
    def test_identity_weights_pass_input_through(self):
        layer = _layer(np.eye(2), [0.0, 0.0], "identity")
        out = forward_dense(layer, Tensor([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_zero_weights_with_tanh_give_zeros(self):
        layer = _layer(np.zeros((3, 4)), np.zeros(3), "tanh")
        out = forward_dense(layer, Tensor(np.random.default_rng(0).normal(size=(5, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((5, 3)))

    def test_affine_map_hand_value(self):
        # [2, 3] @ [1, 1]^T + 0.5 = 5.5
        layer = _layer([[1.0, 1.0]], [0.5], "identity")
        out = forward_dense(layer, Tensor([[2.0, 3.0]]))
        np.testing.assert_allclose(out.data, [[5.5]])

    def test_shape_mismatch_names_both_shapes(self):
        layer = _layer(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(DimensionError, match=r"\(1, 4\).*\(2, 3\)"):
            forward_dense(layer, Tensor(np.zeros((1, 4))))

    def test_unknown_activation_rejected(self):
        with pytest.raises(ValueError, match="gelu"):
            DenseLayer(Tensor(np.zeros((1, 1))), Tensor(np.zeros(1)), "gelu")


class TestSoftmax:
    def test_equal_logits_give_uniform(self):
        out = softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]])

    def test_single_element_gives_one(self):
        out = softmax(Tensor([[7.3]]))
        np.testing.assert_array_equal(out.data, [[1.0]])

    def test_two_logits_match_high_precision_value(self):
        # exp(1)/(exp(1)+exp(2)) = 1/(1+e), frozen from an mpmath evaluation
        out = softmax(Tensor([[1.0, 2.0]]))
        np.testing.assert_allclose(
            out.data, [[0.2689414213699951, 0.7310585786300049]], atol=1e-15)

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 0))))
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 3))), axis=2)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
    @settings(max_examples=200, deadline=None)
    def test_output_is_probability_vector(self, logits):
        row = np.array([logits])
        out = softmax(Tensor(row)).data[0]
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-9

    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=8),
           st.floats(min_value=-100, max_value=100))
    @settings(max_examples=200, deadline=None)
    def test_invariant_under_constant_shift(self, logits, shift):
        row = np.array([logits])
        base = softmax(Tensor(row)).data
        shifted = softmax(Tensor(row + shift)).data
        np.testing.assert_allclose(base, shifted, atol=1e-9)


class TestLosses:
    def test_mae_zero_when_equal(self):
        y = Tensor(np.arange(6.0).reshape(2, 3))
        assert loss_mae(y, Tensor(y.data.copy())).item() == 0.0

    def test_mae_hand_values(self):
        assert loss_mae(Tensor([[1.0, 3.0]]), Tensor([[0.0, 0.0]])).item() == 2.0
        assert loss_mae(Tensor([[-1.0]]), Tensor([[1.0]])).item() == 2.0

    def test_mae_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_mae(Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 2))))

    def test_cross_entropy_perfect_prediction_is_tiny(self):
        onehot = Tensor([[1.0, 0.0], [0.0, 1.0]])
        assert loss_cross_entropy(onehot, Tensor(onehot.data.copy())).item() <= 1e-11

    def test_cross_entropy_uniform_is_log_k(self):
        k = 5
        probs = Tensor(np.full((3, k), 1.0 / k))
        targets = np.zeros((3, k))
        targets[np.arange(3), [0, 2, 4]] = 1.0
        np.testing.assert_allclose(
            loss_cross_entropy(probs, Tensor(targets)).item(), math.log(k), atol=1e-9)

    def test_cross_entropy_hand_value(self):
        out = loss_cross_entropy(Tensor([[0.9, 0.1]]), Tensor([[1.0, 0.0]]))
        np.testing.assert_allclose(out.item(), -math.log(0.9), atol=1e-9)

    def test_cross_entropy_rejects_negative_probs(self):
        with pytest.raises(ValueError, match="non-negative"):
            loss_cross_entropy(Tensor([[-0.1, 1.1]]), Tensor([[1.0, 0.0]]))

    def test_per_sample_variants_row_shapes(self):
        pred = Tensor(np.random.default_rng(1).uniform(0.1, 0.9, size=(4, 3)))
        true = Tensor(np.eye(3)[[0, 1, 2, 0]])
        assert per_sample_cross_entropy(pred, true).shape == (4,)
        assert per_sample_mae(pred, true).shape == (4,)


class TestBackward:
    def test_linear_case_grad_is_input(self):
        w = Tensor([[2.0]], requires_grad=True)
        x = Tensor([[3.0]])
        (w * x).sum().backward()
        np.testing.assert_array_equal(w.grad, [[3.0]])

    def test_zero_coefficient_gives_zero_grad(self):
        w = Tensor([[5.0]], requires_grad=True)
        x = Tensor([[3.0]])
        (w * 0.0 + x).sum().backward()
        np.testing.assert_array_equal(w.grad, [[0.0]])

    def test_unreached_tensor_keeps_no_grad(self):
        w = Tensor([[5.0]], requires_grad=True)
        Tensor([[1.0]]).sum().backward()
        assert w.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(DimensionError, match="scalar"):
            Tensor([[1.0, 2.0]], requires_grad=True).backward()

    def test_repeated_backward_accumulates(self):
        w = Tensor([[2.0]], requires_grad=True)
        loss = (w * 3.0).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(w.grad, [[6.0]])

    def test_take_columns_scatters_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        take_columns(x, [2, 0]).sum().backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])

    def test_composed_network_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        l1 = init_dense(rng, 3, 4, "tanh", name="l1")
        l2 = init_dense(rng, 4, 2, "softmax", name="l2")
        x = rng.normal(size=(6, 3))
        t = np.eye(2)[rng.integers(0, 2, 6)]
        params = l1.parameters() + l2.parameters()

        def run():
            return loss_cross_entropy(l2(l1(Tensor(x))), Tensor(t))

        run().backward()
        analytic = [p.grad.copy() for p in params]
        clear_grads(params)
        numeric = finite_difference_grads(lambda: run().item(), params)
        worst = max(relative_gradient_error(a, n) for a, n in zip(analytic, numeric))
        assert worst < 1e-4


class TestGradientCheckSmallNets:
    """Every parameter gradient of random small networks (<= 64 parameters)
    must match central finite differences within relative error 1e-4."""

    @pytest.mark.parametrize("seed,dims,acts", [
        (0, (2, 3, 1), ("relu", "identity")),
        (1, (3, 4, 2), ("sigmoid", "softmax")),
        (2, (4, 3, 2), ("tanh", "identity")),
    ])
    def test_random_network(self, seed, dims, acts):
        rng = np.random.default_rng(seed)
        layers = [init_dense(rng, dims[i], dims[i + 1], acts[i]) for i in range(2)]
        params = [p for layer in layers for p in layer.parameters()]
        assert sum(p.size for p in params) <= 64
        x = rng.normal(size=(5, dims[0]))
        t = rng.normal(size=(5, dims[-1]))

        def run():
            out = Tensor(x)
            for layer in layers:
                out = layer(out)
            if acts[-1] == "softmax":
                return loss_cross_entropy(out, Tensor(np.abs(t) / np.abs(t).sum(1, keepdims=True)))
            return loss_mae(out, Tensor(t))

        run().backward()
        analytic = [p.grad.copy() for p in params]
        clear_grads(params)
        numeric = finite_difference_grads(lambda: run().item(), params)
        worst = max(relative_gradient_error(a, n) for a, n in zip(analytic, numeric))
        assert worst < 1e-4


class TestOptimizer:
    def test_sgd_rule(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        w.grad = np.array([2.0])
        optimizer_step(Optimizer("sgd", 0.1), [w])
        np.testing.assert_allclose(w.data, [0.8])

    def test_sgd_zero_grad_leaves_unchanged(self):
        w = Tensor([1.5], requires_grad=True)
        w.grad = np.array([0.0])
        optimizer_step(Optimizer("sgd", 0.1), [w])
        np.testing.assert_array_equal(w.data, [1.5])

    def test_adam_zero_grad_with_fresh_moments_unchanged(self):
        w = Tensor([1.5], requires_grad=True)
        w.grad = np.array([0.0])
        optimizer_step(Optimizer("adam", 0.1), [w])
        np.testing.assert_array_equal(w.data, [1.5])

    def test_adam_first_step_hand_evaluation(self):
        # bias-corrected first step: m_hat = g, v_hat = g^2,
        # delta = lr * g / (|g| + eps)
        w = Tensor([1.0], requires_grad=True)
        g = 2.0
        w.grad = np.array([g])
        optimizer_step(Optimizer("adam", 0.1), [w])
        expected = 1.0 - 0.1 * g / (abs(g) + 1e-8)
        np.testing.assert_allclose(w.data, [expected], rtol=1e-12)
        assert np.sign(w.data[0] - 1.0) == -np.sign(g)

    def test_missing_grad_names_parameter(self):
        w = Tensor([1.0], requires_grad=True, name="gate_3.context")
        with pytest.raises(GradientError, match="gate_3.context"):
            optimizer_step(Optimizer("sgd", 0.1), [w])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="rmsprop"):
            Optimizer("rmsprop", 0.1)


class TestDeterminism:
    def test_same_seed_bitwise_identical_init(self):
        a = init_dense(np.random.default_rng(77), 5, 3, "tanh")
        b = init_dense(np.random.default_rng(77), 5, 3, "tanh")
        np.testing.assert_array_equal(a.weights.data, b.weights.data)
        np.testing.assert_array_equal(a.bias.data, b.bias.data)

    def test_bias_is_zero_initialized(self):
        layer = init_dense(np.random.default_rng(0), 4, 4)
        np.testing.assert_array_equal(layer.bias.data, np.zeros(4))


class TestBatchEquivalence:
    def test_linear_is_bitwise_batch_independent(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(7, 13)))
        b = Tensor(rng.normal(size=7))
        x = rng.normal(size=(32, 13))
        full = linear(Tensor(x), w, b).data
        for i in range(32):
            row = linear(Tensor(x[i:i + 1]), w, b).data
            np.testing.assert_array_equal(row[0], full[i])
