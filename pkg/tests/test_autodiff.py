"""Tests for the tape-based autodiff engine."""

import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import (
    DomainError,
    Graph,
    GradientMap,
    ShapeError,
    Tensor,
    backward,
    finite_difference_oracle,
    forward_op,
    grad,
    grad_norm,
)
from src.config import NumericError

SEEDS = range(20)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def check_gradient(f, x: np.ndarray, tol: float = 1e-4) -> None:
    """Compare the tape gradient of a scalar function with central differences."""
    leaf = Tensor(x, requires_grad=True)
    with Graph():
        (g,) = grad(f(leaf), leaf)
    numeric = finite_difference_oracle(f, x)
    assert relative_error(g.values, numeric.values) < tol


def weighted(op, shape, rng):
    """Scalar test function sum(W * op(x)) with fixed random weights."""
    w = rng.standard_normal(shape)
    return lambda x: (op(x) * Tensor(w)).sum()


class TestTensor:
    """Tests for the Tensor wrapper."""

    def test_default_dtype_is_float64(self):
        """Test that integer data is promoted to the default float dtype."""
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_float32_preserved(self):
        """Test that float32 data keeps its dtype."""
        assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32

    def test_item_requires_scalar(self):
        """Test that item() rejects non-scalars."""
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_ops_outside_graph_are_not_recorded(self):
        """Test that no graph means no recording."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        assert y.node_id is None
        assert not y.requires_grad


class TestGraph:
    """Tests for recording rules."""

    def test_records_only_when_input_requires_grad(self):
        """Test that constant-only ops are not recorded."""
        with Graph() as g:
            a = Tensor([1.0, 2.0])
            _ = a + 1.0
            assert len(g) == 0
            b = Tensor([1.0, 2.0], requires_grad=True)
            _ = b + 1.0
            assert len(g) == 1

    def test_no_record_suspends_recording(self):
        """Test that no_record blocks recording inside an active graph."""
        with Graph() as g:
            x = Tensor([1.0], requires_grad=True)
            with ad.no_record():
                _ = x * 3.0
            assert len(g) == 0

    def test_freeze_is_captured_at_record_time(self):
        """Test that flipping requires_grad after recording does not change routing."""
        w = Tensor([2.0], requires_grad=True)
        x = Tensor([3.0], requires_grad=True)
        with Graph():
            w.requires_grad = False
            y = (w * x).sum()
            w.requires_grad = True
            grads = backward(y)
        assert w not in grads
        np.testing.assert_allclose(grads[x].values, [2.0])

    def test_unreachable_gradient_is_zero(self):
        """Test that grad returns zeros for inputs not in the graph."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        other = Tensor([5.0], requires_grad=True)
        with Graph():
            y = (x * x).sum()
            gx, go = grad(y, [x, other])
        np.testing.assert_allclose(gx.values, [2.0, 4.0])
        np.testing.assert_allclose(go.values, [0.0])

    def test_shared_input_accumulates(self):
        """Test that an input used twice receives both contributions."""
        x = Tensor([3.0], requires_grad=True)
        with Graph():
            y = (x * x + x).sum()
            (g,) = grad(y, x)
        np.testing.assert_allclose(g.values, [7.0])


class TestElementwiseGradients:
    """Finite-difference checks for elementwise ops."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_arithmetic(self, seed):
        """Test add, sub, mul and div with broadcasting."""
        rng = np.random.default_rng(seed)
        c = Tensor(rng.uniform(1.0, 2.0, size=(1, 4)))
        f = weighted(lambda x: (x + c) * x - x / c + 2.0 - x, (3, 4), rng)
        check_gradient(f, rng.standard_normal((3, 4)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_transcendental(self, seed):
        """Test exp, log, sqrt and tanh on positive inputs."""
        rng = np.random.default_rng(seed)
        f = weighted(lambda x: ad.exp(x) * 0.1 + ad.log(x) + ad.sqrt(x) + ad.tanh(x), (5,), rng)
        check_gradient(f, rng.uniform(0.5, 2.0, size=5))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_and_abs_away_from_kink(self, seed):
        """Test piecewise-linear ops away from zero."""
        rng = np.random.default_rng(seed)
        x = rng.choice([-1.0, 1.0], size=6) * rng.uniform(0.2, 1.0, size=6)
        f = weighted(lambda t: ad.relu(t) + t.abs(), (6,), rng)
        check_gradient(f, x)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_power(self, seed):
        """Test integer and fractional powers."""
        rng = np.random.default_rng(seed)
        f = weighted(lambda x: ad.power(x, 3) + ad.power(x, 0.5), (4,), rng)
        check_gradient(f, rng.uniform(0.5, 1.5, size=4))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        """Test softmax over the last axis."""
        rng = np.random.default_rng(seed)
        check_gradient(weighted(ad.softmax, (2, 5), rng), rng.standard_normal((2, 5)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_clamp_min(self, seed):
        """Test clamp_min away from the threshold."""
        rng = np.random.default_rng(seed)
        x = rng.choice([0.1, 0.9], size=5) + rng.uniform(0.0, 0.05, size=5)
        check_gradient(weighted(lambda t: ad.clamp_min(t, 0.5), (5,), rng), x)


class TestShapeGradients:
    """Finite-difference checks for linear algebra and shape ops."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        """Test matmul against a fixed right operand."""
        rng = np.random.default_rng(seed)
        b = Tensor(rng.standard_normal((4, 3)))
        check_gradient(weighted(lambda x: x @ b, (2, 3), rng), rng.standard_normal((2, 4)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reductions_and_reshapes(self, seed):
        """Test sum, mean, reshape and transpose."""
        rng = np.random.default_rng(seed)

        def op(x):
            return ad.mean(x.reshape(3, 2, 2).transpose((2, 0, 1)), axis=1) + x.sum(axis=0).reshape(1, 2, 2).sum()

        check_gradient(weighted(op, (2, 2), rng), rng.standard_normal((3, 4)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_broadcast_and_sum_to(self, seed):
        """Test the broadcast/sum-to pair."""
        rng = np.random.default_rng(seed)
        f = weighted(lambda x: ad.sum_to(ad.broadcast_to(x, (3, 4)) * 2.0, (1, 4)), (1, 4), rng)
        check_gradient(f, rng.standard_normal((1, 4)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat(self, seed):
        """Test concatenation with a constant block."""
        rng = np.random.default_rng(seed)
        other = Tensor(rng.standard_normal((2, 2)))
        f = weighted(lambda x: ad.concat([x, other, x * x], axis=1), (2, 6), rng)
        check_gradient(f, rng.standard_normal((2, 2)))


class TestImageGradients:
    """Finite-difference checks for convolution and pooling."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d_input_and_kernel(self, seed):
        """Test conv2d gradients with respect to input and kernel."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_gradient(weighted(lambda t: ad.conv2d(t, Tensor(w), Tensor(b), pad=1), (2, 3, 5, 5), rng), x)
        check_gradient(weighted(lambda t: ad.conv2d(Tensor(x), t, None, pad=1), (2, 3, 5, 5), rng), w)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_pooling_and_upsampling(self, seed):
        """Test meanpool2x, upsample2x and sum_pool."""
        rng = np.random.default_rng(seed)
        f = weighted(lambda t: ad.meanpool2x(ad.upsample2x(t)) + ad.sum_pool(t, 2).sum(), (1, 2, 4, 4), rng)
        check_gradient(f, rng.standard_normal((1, 2, 4, 4)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_maxpool_with_distinct_values(self, seed):
        """Test maxpool where every window has a unique maximum."""
        rng = np.random.default_rng(seed)
        x = rng.permutation(32).reshape(1, 2, 4, 4).astype(np.float64) * 0.1
        check_gradient(weighted(lambda t: ad.maxpool(t, 2), (1, 2, 2, 2), rng), x)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batch_norm(self, seed):
        """Test batch normalization with batch statistics."""
        rng = np.random.default_rng(seed)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3))
        beta = Tensor(rng.standard_normal(3))
        f = weighted(lambda t: ad.batch_norm(t, gamma, beta), (4, 3, 2, 2), rng)
        check_gradient(f, rng.standard_normal((4, 3, 2, 2)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_dense(self, seed):
        """Test the affine layer with respect to its weight."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal(2))
        check_gradient(weighted(lambda w: ad.dense(x, w, b), (3, 2), rng), rng.standard_normal((4, 2)))


class TestForwardValues:
    """Tests for forward semantics."""

    def test_conv_of_ones(self):
        """Test that a 3x3 ones kernel over ones gives 9 inside and 4 at corners."""
        out = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), pad=1).values[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 1] == 6.0

    def test_upsample_then_meanpool_is_identity(self):
        """Test that mean pooling undoes nearest upsampling."""
        x = np.arange(8.0).reshape(1, 2, 2, 2)
        np.testing.assert_allclose(ad.meanpool2x(ad.upsample2x(x)).values, x)

    def test_maxpool_values(self):
        """Test 2x2 max pooling."""
        x = np.array([[1.0, 5.0], [3.0, 2.0]]).reshape(1, 1, 2, 2)
        assert ad.maxpool(x, 2).values.item() == 5.0

    def test_softmax_rows_sum_to_one(self):
        """Test softmax normalization with large logits."""
        out = ad.softmax(np.array([[1000.0, 1000.0, 0.0]])).values
        np.testing.assert_allclose(out.sum(), 1.0)
        np.testing.assert_allclose(out[0, :2], [0.5, 0.5])

    def test_forward_op_by_name(self):
        """Test name-based dispatch."""
        out = forward_op("maxpool2x2", [np.arange(16.0).reshape(1, 1, 4, 4)])
        np.testing.assert_allclose(out.values[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_forward_op_unknown(self):
        """Test that unknown op kinds are rejected."""
        with pytest.raises(ValueError, match="Unknown op kind"):
            forward_op("fft", [np.ones(2)])


class TestErrors:
    """Tests for shape and domain errors."""

    def test_matmul_shape_error(self):
        """Test that mismatched inner dimensions raise ShapeError."""
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_broadcast_shape_error(self):
        """Test that non-broadcastable adds raise ShapeError."""
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_conv_channel_mismatch(self):
        """Test that conv2d checks channels."""
        with pytest.raises(ShapeError):
            ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))

    def test_pool_requires_divisible_size(self):
        """Test that pooling an odd-sized map is a ShapeError."""
        with pytest.raises(ShapeError):
            ad.meanpool2x(np.ones((1, 1, 3, 3)))

    def test_log_domain(self):
        """Test that log of a non-positive value is a DomainError."""
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, 0.0]))

    def test_sqrt_domain(self):
        """Test that sqrt of a negative value is a DomainError."""
        with pytest.raises(DomainError):
            ad.sqrt(np.array([-1.0]))

    def test_fractional_power_of_negative(self):
        """Test that a fractional power of a negative value is a DomainError."""
        with pytest.raises(DomainError):
            ad.power(np.array([-2.0]), 0.5)

    def test_backward_needs_scalar(self):
        """Test that backward rejects non-scalar losses."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph():
            with pytest.raises(ShapeError):
                backward(x * 2.0)

    def test_debug_mode_catches_overflow(self, monkeypatch):
        """Test that debug mode flags non-finite output from finite input."""
        monkeypatch.setenv("DEBUG", "true")
        with pytest.raises(NumericError):
            ad.exp(np.array([1000.0]))


class TestGradNorm:
    """Tests for per-sample gradient norms."""

    def test_linear_map_norm(self):
        """Test that the gradient norm of x.w is ||w|| for every sample."""
        w = np.array([[3.0], [4.0]])
        x = Tensor(np.random.default_rng(0).standard_normal((5, 2)), requires_grad=True)
        with Graph():
            out = (x @ Tensor(w)).reshape(5)
            norms = grad_norm(out, x)
        np.testing.assert_allclose(norms.values, np.full(5, 5.0), atol=1e-9)

    def test_zero_gradient_is_finite(self):
        """Test that a zero gradient gives a small finite norm."""
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Graph():
            out = (x * 0.0).sum(axis=1)
            norms = grad_norm(out, x)
        assert np.all(np.isfinite(norms.values))
        np.testing.assert_allclose(norms.values, 1e-6, rtol=1e-6)

    def test_general_p(self):
        """Test the p=1 norm."""
        x = Tensor(np.ones((1, 3)), requires_grad=True)
        with Graph():
            out = (x * Tensor(np.array([1.0, -2.0, 3.0]))).sum(axis=1)
            norms = grad_norm(out, x, p=1)
        np.testing.assert_allclose(norms.values, [6.0], atol=1e-9)

    def test_rejects_non_positive_p(self):
        """Test that p <= 0 is rejected."""
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        with Graph():
            out = x.sum(axis=1)
            with pytest.raises(ValueError):
                grad_norm(out, x, p=0)


class TestDoubleBackprop:
    """Gradients of gradients."""

    def test_second_derivative_of_cube(self):
        """Test d2/dx2 of x^3 = 6x."""
        x = Tensor([2.0], requires_grad=True)
        with Graph(differentiable=True):
            y = ad.power(x, 3).sum()
            (g,) = grad(y, x, create_graph=True)
            (h,) = grad(g.sum(), x)
        np.testing.assert_allclose(g.values, [12.0])
        np.testing.assert_allclose(h.values, [12.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_penalty_gradient_matches_finite_differences(self, seed):
        """Test the gradient of a norm-of-gradient penalty with respect to weights."""
        rng = np.random.default_rng(seed)
        x_np = rng.standard_normal((4, 3))
        w0 = rng.standard_normal((3, 2))

        def penalty(w: Tensor) -> Tensor:
            x = Tensor(x_np, requires_grad=True)
            with Graph(differentiable=True):
                out = ad.tanh(x @ w).sum(axis=1)
                norms = grad_norm(out, x, create_graph=True)
                dev = norms - 1.0
                return ad.mean(dev * dev)

        w = Tensor(w0, requires_grad=True)
        grads = backward(penalty(w))
        numeric = np.zeros_like(w0)
        h = 1e-5
        for idx in np.ndindex(*w0.shape):
            plus, minus = w0.copy(), w0.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (penalty(Tensor(plus)).item() - penalty(Tensor(minus)).item()) / (2 * h)
        assert relative_error(grads[w].values, numeric) < 1e-3


class TestGradientMap:
    """Tests for identity-keyed gradient storage."""

    def test_set_get(self):
        """Test storage keyed by tensor identity."""
        a, b = Tensor([1.0]), Tensor([1.0])
        gm = GradientMap()
        gm.set(a, Tensor([2.0]))
        assert a in gm
        assert b not in gm
        assert gm.get(b) is None
        assert len(gm) == 1
        with pytest.raises(KeyError):
            gm[b]
