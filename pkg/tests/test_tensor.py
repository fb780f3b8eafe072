"""Core tensor engine: arithmetic, reductions, shape ops, matmul, backward."""

import numpy as np
import pytest

from roadfusion.gradcheck import check_gradients
from roadfusion.tensor import Tensor, concat, no_grad, seed_all, spawn_rng, take_flat

from conftest import tensor64


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones(3, dtype=np.float32))

    def test_square_sum_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            x.backward()

    def test_gradients_accumulate_until_reset(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        assert np.allclose(x.grad, [2.0])
        x.zero_grad()
        x.sum().backward()
        assert np.allclose(x.grad, [1.0])

    def test_composite_chain_matches_finite_differences(self, rng):
        x = tensor64(rng, 3, 4)
        check_gradients(lambda: ((x * 2.0 + 1.0).exp().log() * x).mean(), [x])

    def test_shared_subexpression(self, rng):
        x = tensor64(rng, 5)
        check_gradients(lambda: (x * x + x - x.exp()).sum(), [x])

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad


class TestArithmetic:
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow"])
    def test_gradients(self, rng, op):
        a = tensor64(rng, 2, 3)
        b = Tensor(rng.standard_normal((2, 3)) + 3.0, requires_grad=True, dtype=np.float64)
        fns = {
            "add": lambda: (a + b).sum(),
            "sub": lambda: (a - b).sum(),
            "mul": lambda: (a * b).mean(),
            "div": lambda: (a / b).mean(),
            "pow": lambda: (b ** 1.7).sum(),
        }
        check_gradients(fns[op], [a, b])

    def test_broadcast_gradients(self, rng):
        a = tensor64(rng, 2, 3, 4)
        b = tensor64(rng, 3, 1)
        check_gradients(lambda: (a * b + b).sum(), [a, b])

    def test_scalar_operand(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = 2.0 * x + 1.0
        assert np.allclose(y.data, [3.0, 5.0])
        y.sum().backward()
        assert np.allclose(x.grad, [2.0, 2.0])


class TestReductions:
    def test_mean_axis_keepdims(self, rng):
        x = tensor64(rng, 2, 3, 4)
        out = x.mean(axis=(0, 2), keepdims=True)
        assert out.shape == (1, 3, 1)
        assert np.allclose(out.data, x.data.mean(axis=(0, 2), keepdims=True))
        check_gradients(lambda: (x.mean(axis=(0, 2), keepdims=True) ** 2.0).sum(), [x])

    def test_sum_axis(self, rng):
        x = tensor64(rng, 4, 5)
        check_gradients(lambda: (x.sum(axis=1) ** 2.0).sum(), [x])


class TestShapeOps:
    def test_reshape_roundtrip(self, rng):
        x = tensor64(rng, 2, 6)
        check_gradients(lambda: (x.reshape(3, 4) ** 2.0).sum(), [x])

    def test_permute(self, rng):
        x = tensor64(rng, 2, 3, 4)
        y = x.permute(2, 0, 1)
        assert y.shape == (4, 2, 3)
        check_gradients(lambda: (x.permute(2, 0, 1) ** 2.0).mean(), [x])

    def test_getitem_slice(self, rng):
        x = tensor64(rng, 4, 6)
        y = x[1:3, ::2]
        assert y.shape == (2, 3)
        check_gradients(lambda: (x[1:3, ::2] ** 2.0).sum(), [x])

    def test_concat_values_and_gradients(self, rng):
        a = tensor64(rng, 2, 3)
        b = tensor64(rng, 2, 5)
        out = concat([a, b], axis=1)
        assert out.shape == (2, 8)
        assert np.array_equal(out.data, np.concatenate([a.data, b.data], axis=1))
        check_gradients(lambda: (concat([a, b], axis=1) ** 2.0).sum(), [a, b])

    def test_take_flat_gather_scatter(self, rng):
        x = tensor64(rng, 6)
        idx = np.array([5, 0, 0, 3])
        out = take_flat(x, idx)
        assert np.array_equal(out.data, x.data[idx])
        check_gradients(lambda: (take_flat(x, idx) * Tensor(np.arange(4.0))).sum(), [x])


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 3))
        out = Tensor(np.eye(3)) @ Tensor(x)
        assert np.allclose(out.data, x)

    def test_matches_triple_loop_oracle(self, rng):
        a = rng.standard_normal((1, 2, 3))
        b = rng.standard_normal((3, 2))
        out = (Tensor(a) @ Tensor(b)).data
        expected = np.zeros((1, 2, 2))
        for i in range(1):
            for m in range(2):
                for n in range(2):
                    for k in range(3):
                        expected[i, m, n] += a[i, m, k] * b[k, n]
        assert np.allclose(out, expected, atol=1e-6)

    def test_uniform_attention_preserves_constant_values(self):
        # softmax(Q K^T / sqrt(d)) V with Q=K=V=ones -> ones
        from roadfusion.functional import softmax

        ones = Tensor(np.ones((1, 4, 2)))
        scores = (ones @ ones.permute(0, 2, 1)) * (1 / np.sqrt(2))
        out = softmax(scores, axis=-1) @ ones
        assert np.allclose(out.data, np.ones((1, 4, 2)), atol=1e-6)

    def test_inner_dimension_mismatch_diagnostic(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_batched_broadcast_gradients(self, rng):
        a = tensor64(rng, 2, 3, 4)
        b = tensor64(rng, 4, 5)
        check_gradients(lambda: ((a @ b) ** 2.0).mean(), [a, b])


class TestDeterminism:
    def test_identical_seeds_identical_streams(self):
        seed_all(99)
        first = spawn_rng(3).standard_normal(8)
        seed_all(99)
        second = spawn_rng(3).standard_normal(8)
        assert np.array_equal(first, second)

    def test_forward_passes_bitwise_identical(self, rng):
        from roadfusion import functional as F

        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        a = F.conv2d(x, w, padding=1).data
        b = F.conv2d(x, w, padding=1).data
        assert np.array_equal(a, b)
