import numpy as np
import pytest
from hypothesis import given, strategies as st

from tryoff.errors import ContractError, DimensionError
from tryoff.tensor import (ComputationRecord, Parameter, Tensor, add, backward,
                           conv2d, exp, matmul, mean_, mul, no_grad, reshape,
                           rsqrt, scale, silu, softmax, square, sum_, tanh,
                           transpose, upsample_nearest)

from conftest import finite_difference_check


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3)).astype(np.float32)
        out = matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a))
        assert np.allclose(out.data, a)

    def test_hand_multiplication(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_dimension_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"2, 3.*4, 5"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batched_broadcast_grads(self, rng):
        a = Tensor(rng.standard_normal((4, 3, 5)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 2)).astype(np.float32), requires_grad=True)
        backward(matmul(a, w).sum())
        assert a.grad.shape == (4, 3, 5)
        assert w.grad.shape == (5, 2)
        # weight gradient sums over the broadcast batch
        expected_w = np.einsum("bik,bij->kj", a.data, np.ones((4, 3, 2), np.float32))
        assert np.allclose(w.grad, expected_w, atol=1e-5)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]).reshape(1, 3), axis=-1)
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_overflow_stabilized(self):
        out = softmax(Tensor([1000.0, 0.0]).reshape(1, 2), axis=-1)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [[1.0, 0.0]], atol=1e-6)

    def test_direct_exponentiation_oracle(self):
        out = softmax(Tensor([1.0, 2.0, 3.0]).reshape(1, 3), axis=-1)
        assert np.allclose(out.data, [[0.09003, 0.24473, 0.66524]], atol=1e-4)

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 2))), axis=5)

    @given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3))
    def test_rows_sum_to_one_across_magnitudes(self, seed, log_mag):
        r = np.random.default_rng(seed)
        x = (r.standard_normal((3, 7)) * 10.0 ** log_mag).astype(np.float32)
        out = softmax(Tensor(x), axis=1)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0 + 1e-7)

    def test_open_interval_at_moderate_magnitude(self, rng):
        x = rng.standard_normal((4, 6)).astype(np.float32)
        out = softmax(Tensor(x), axis=1)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
        k = np.ones((1, 1, 1, 1), dtype=np.float32)
        out = conv2d(Tensor(x), Tensor(k), stride=1, padding=0)
        assert np.allclose(out.data, x)

    def test_box_sum_on_constant(self):
        x = np.full((1, 1, 6, 6), 2.5, dtype=np.float32)
        k = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = conv2d(Tensor(x), Tensor(k), stride=1, padding=0)
        assert np.allclose(out.data, 9 * 2.5)

    def test_sliding_window_oracle(self, rng):
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        k = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(k), stride=2, padding=0)
        expected = np.zeros((2, 2), dtype=np.float32)
        for i in range(2):
            for j in range(2):
                expected[i, j] = np.sum(x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2] * k[0, 0])
        assert np.allclose(out.data[0, 0], expected, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_empty_output_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        backward(p.sum())
        assert np.array_equal(p.grad, np.ones((3, 4), dtype=np.float32))

    def test_quadratic_gives_identity(self, rng):
        p = Tensor(rng.standard_normal((5,)).astype(np.float32), requires_grad=True)
        backward(scale(sum_(square(p)), 0.5))
        assert np.allclose(p.grad, p.data, atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.zeros(3), requires_grad=True))

    def test_frozen_parameter_receives_no_gradient(self, rng):
        frozen = Parameter("w", rng.standard_normal((4, 4)).astype(np.float32),
                           trainable=False)
        x = Tensor(rng.standard_normal((2, 4)).astype(np.float32), requires_grad=True)
        backward(matmul(x, frozen.value).sum())
        assert frozen.gradient is None
        assert x.grad is not None  # gradient still flows through

    def test_record_visits_each_op_once(self, rng):
        x = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
        y = mul(x, x)
        z = add(y, y)  # diamond: y consumed twice
        loss = z.sum()
        record = ComputationRecord.trace(loss)
        backward(loss, record)
        recorded_ops = [n for n in record.nodes if n._backward is not None]
        assert record.visits == len(recorded_ops)
        assert np.allclose(x.grad, 4 * x.data, atol=1e-6)

    def test_composite_finite_difference(self, rng):
        w1 = Tensor(rng.standard_normal((6, 5)).astype(np.float64), requires_grad=True)
        w2 = Tensor(rng.standard_normal((5, 3)).astype(np.float64), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 6)).astype(np.float64), requires_grad=True)

        def loss_fn():
            h = silu(matmul(x, w1))
            y = tanh(matmul(h, w2))
            return mean_(square(y))

        finite_difference_check(loss_fn, [w1, w2, x])


class TestPrimitiveGradients:
    """Per-primitive analytic vs central-difference agreement (float64)."""

    @pytest.mark.parametrize("name,builder", [
        ("silu", lambda x: sum_(silu(x))),
        ("tanh", lambda x: sum_(tanh(x))),
        ("exp", lambda x: sum_(exp(scale(x, 0.3)))),
        ("rsqrt", lambda x: sum_(rsqrt(add(square(x), 1.0)))),
        ("softmax", lambda x: sum_(square(softmax(x, axis=-1)))),
        ("mean", lambda x: mean_(square(x))),
        ("reshape", lambda x: sum_(square(reshape(x, (12,))))),
        ("transpose", lambda x: sum_(square(transpose(x, (1, 0))))),
    ])
    def test_elementwise(self, name, builder, rng):
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float64), requires_grad=True)
        finite_difference_check(lambda: builder(x), [x])

    def test_conv2d_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float64), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float64) * 0.3,
                   requires_grad=True)
        finite_difference_check(lambda: sum_(square(conv2d(x, k, 2, 1))), [x, k],
                                max_elems=40)

    def test_upsample_gradients(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float64), requires_grad=True)
        finite_difference_check(lambda: sum_(square(upsample_nearest(x, 2))), [x])

    def test_matmul_gradients(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)).astype(np.float64), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)).astype(np.float64), requires_grad=True)
        finite_difference_check(lambda: sum_(square(matmul(a, b))), [a, b])


class TestEngineBasics:
    def test_forward_determinism(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

        def run():
            return silu(conv2d(Tensor(x), Tensor(k), 1, 1)).data

        assert np.array_equal(run(), run())

    def test_no_grad_suppresses_graph(self, rng):
        x = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert y._backward is None and not y.requires_grad

    def test_finite_outputs_after_forward_backward(self, rng):
        x = Tensor(rng.standard_normal((2, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        loss = mean_(square(softmax(matmul(silu(matmul(x, w)), w), axis=-1)))
        backward(loss)
        for t in (x, w):
            assert np.all(np.isfinite(t.data)) and np.all(np.isfinite(t.grad))

    def test_trainable_flag_roundtrip(self, rng):
        p = Parameter("p", rng.standard_normal(4).astype(np.float32))
        assert p.trainable and p.value.requires_grad
        p.trainable = False
        assert not p.value.requires_grad


class TestTensorInvariants:
    @given(st.integers(0, 2 ** 31 - 1))
    def test_shape_data_consistency(self, seed):
        r = np.random.default_rng(seed)
        shape = tuple(int(s) for s in r.integers(1, 5, size=r.integers(1, 4)))
        t = Tensor(r.standard_normal(shape).astype(np.float32))
        assert t.size == int(np.prod(shape))
        assert t.data.flags["C_CONTIGUOUS"]
