"""Tensor engine tests: forward semantics plus finite-difference checks."""

import numpy as np
import pytest

from vidsim.tensor import (
    Parameter,
    Tensor,
    activation,
    concat,
    conv,
    dense,
    leaky_relu,
    matmul,
    no_grad,
    pool,
    relu,
    seq_norm,
    sgd_step,
    sigmoid,
    softmax,
    stack,
    tanh,
    upsample,
    xavier_uniform,
)

from oracles import check_gradients, random_projection_scalar, unrolled_momentum_sgd


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 5, 3))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0] = np.eye(3)
        out = conv(Tensor(x), Tensor(k), stride=1, padding="same")
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_center_sum(self):
        x = np.arange(16, dtype=float).reshape(4, 4, 1)
        k = np.ones((3, 3, 1, 1))
        out = conv(Tensor(x), Tensor(k), padding="same")
        # interior cell sees its full 3x3 neighborhood
        expected = x[0:3, 0:3, 0].sum()
        assert out.data[1, 1, 0] == pytest.approx(expected)

    def test_valid_padding_shape(self):
        x = np.zeros((6, 6, 2))
        k = np.zeros((3, 3, 2, 4))
        out = conv(Tensor(x), Tensor(k), padding="valid")
        assert out.shape == (4, 4, 4)

    def test_stride_shape(self):
        x = np.zeros((8, 8, 1))
        k = np.zeros((3, 3, 1, 2))
        out = conv(Tensor(x), Tensor(k), stride=2, padding="same")
        assert out.shape == (4, 4, 2)

    def test_leading_batch_axes(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 4))
        out = conv(Tensor(x), Tensor(k)).data
        single = conv(Tensor(x[1, 2]), Tensor(k)).data
        np.testing.assert_allclose(out[1, 2], single, rtol=0, atol=0)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channels"):
            conv(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))

    def test_3d_spatial(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 4, 4, 2))
        k = rng.standard_normal((3, 3, 3, 2, 3))
        out = conv(Tensor(x), Tensor(k))
        assert out.shape == (4, 4, 4, 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_same_padding(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 4, 2))
        k = rng.standard_normal((3, 3, 2, 3))

        def build(xt, kt):
            return random_projection_scalar(conv(xt, kt), np.random.default_rng(99))

        check_gradients(build, [x, k], rel_tol=1e-4)

    def test_gradient_stride_valid(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((6, 6, 2))
        k = rng.standard_normal((3, 3, 2, 2))

        def build(xt, kt):
            out = conv(xt, kt, stride=2, padding="valid")
            return random_projection_scalar(out, np.random.default_rng(5))

        check_gradients(build, [x, k], rel_tol=1e-4)

    def test_kernel_grad_of_summed_output(self):
        # d(sum(out))/dk vs finite differences, the op-contract example
        rng = np.random.default_rng(11)
        x = rng.standard_normal((4, 4, 1))
        k = rng.standard_normal((3, 3, 1, 1))
        check_gradients(lambda xt, kt: conv(xt, kt).sum(), [x, k], rel_tol=1e-4)


class TestActivations:
    def test_leaky_relu_values(self):
        out = leaky_relu(Tensor(np.array([0.0, -2.0, 3.0])), slope=0.2)
        np.testing.assert_allclose(out.data, [0.0, -0.4, 3.0])

    def test_activation_dispatch(self):
        x = Tensor(np.array([-1.0, 0.5]))
        np.testing.assert_allclose(
            activation(x, "tanh").data, np.tanh(x.data)
        )
        with pytest.raises(ValueError, match="unknown activation"):
            activation(x, "gelu")

    @pytest.mark.parametrize("kind", ["leaky_relu", "sigmoid", "tanh"])
    def test_gradients(self, kind):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 5)) + 0.1  # nudge off the relu kink

        def build(xt):
            return random_projection_scalar(
                activation(xt, kind, slope=0.2), np.random.default_rng(4)
            )

        check_gradients(build, [x], rel_tol=1e-4)

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        relu(x).sum().backward()
        assert x.grad[0] == 0.0

    def test_outputs_finite_on_wide_range(self):
        x = Tensor(np.linspace(-10, 10, 101))
        for kind in ("leaky_relu", "sigmoid", "tanh"):
            assert np.all(np.isfinite(activation(x, kind).data))


class TestPool:
    def test_window_one_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 4, 2))
        np.testing.assert_array_equal(pool(Tensor(x), "max", 1).data, x)

    def test_max_pool_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        out = pool(Tensor(x), "max", 2)
        assert out.data.reshape(()) == 4.0

    def test_indivisible_raises(self):
        with pytest.raises(ValueError, match="divisible"):
            pool(Tensor(np.zeros((5, 4, 1))), "avg", 2)

    def test_avg_matches_manual(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 6, 3))
        out = pool(Tensor(x), "avg", 2)
        manual = x.reshape(2, 2, 3, 2, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(out.data, manual)

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_gradients(self, kind):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 4, 2))

        def build(xt):
            return random_projection_scalar(
                pool(xt, kind, 2), np.random.default_rng(10)
            )

        check_gradients(build, [x], rel_tol=1e-4)

    def test_max_grad_routes_to_argmax(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1), requires_grad=True)
        pool(x, "max", 2).sum().backward()
        np.testing.assert_array_equal(
            x.grad.reshape(2, 2), [[0.0, 0.0], [0.0, 1.0]]
        )


class TestUpsample:
    def test_factor_one_identity(self):
        x = np.random.default_rng(1).standard_normal((3, 3, 2))
        np.testing.assert_array_equal(upsample(Tensor(x), 1).data, x)

    def test_repeat_pattern(self):
        x = np.array([[1.0, 2.0]]).reshape(1, 2, 1)
        out = upsample(Tensor(x), 2).data.reshape(2, 4)
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_factor_below_one_raises(self):
        with pytest.raises(ValueError, match="factor"):
            upsample(Tensor(np.zeros((2, 2, 1))), 0)

    def test_upsample_then_avg_pool_is_identity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 5, 4))
        back = pool(upsample(Tensor(x), 2), "avg", 2)
        np.testing.assert_allclose(back.data, x)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 3, 2))

        def build(xt):
            return random_projection_scalar(upsample(xt, 2), np.random.default_rng(13))

        check_gradients(build, [x], rel_tol=1e-4)


class TestDense:
    def test_identity(self):
        x = np.arange(4, dtype=float)
        out = dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="dense"):
            dense(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))

    def test_target_embedding_shape(self):
        # the production encoder maps a 32*32*16 feature block to 4000 entries
        w = np.zeros((32 * 32 * 16, 4000))
        out = dense(Tensor(np.zeros(32 * 32 * 16)), Tensor(w), Tensor(np.zeros(4000)))
        assert out.shape == (4000,)

    def test_gradient(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal(6)
        w = rng.standard_normal((6, 3))
        b = rng.standard_normal(3)

        def build(xt, wt, bt):
            return random_projection_scalar(
                dense(xt, wt, bt), np.random.default_rng(15)
            )

        check_gradients(build, [x, w, b], rel_tol=1e-4)

    def test_batched(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((4, 2))
        b = rng.standard_normal(2)
        out = dense(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, x @ w + b)


class TestSeqNorm:
    def test_constant_channel_is_zeroed(self):
        x = Tensor(np.full((2, 3, 4, 4, 2), 7.0))
        g = Tensor(np.ones(2))
        b = Tensor(np.zeros(2))
        out = seq_norm(x, g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-2)

    def test_two_value_channel(self):
        # values {1,3} normalize to {-1,+1} under population variance
        x = np.array([1.0, 3.0, 1.0, 3.0]).reshape(4, 1)
        out = seq_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)))
        np.testing.assert_allclose(
            out.data.ravel(), [-1.0, 1.0, -1.0, 1.0], atol=1e-4
        )

    def test_post_norm_statistics(self):
        rng = np.random.default_rng(17)
        x = rng.normal(3.0, 2.5, size=(4, 5, 6, 6, 3))
        out = seq_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        means = out.reshape(-1, 3).mean(axis=0)
        assert np.all(np.abs(means) < 1e-6)
        stds = out.reshape(-1, 3).std(axis=0)
        assert np.all(np.abs(stds - 1.0) < 1e-3)

    def test_gradient_through_statistics(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((3, 4, 2))
        g = rng.standard_normal(2)
        b = rng.standard_normal(2)

        def build(xt, gt, bt):
            return random_projection_scalar(
                seq_norm(xt, gt, bt), np.random.default_rng(19)
            )

        check_gradients(build, [x, g, b], rel_tol=1e-4)


class TestSgd:
    def _param(self, value):
        p = Parameter("p", np.array([value]))
        return p

    def test_zero_lr_is_identity(self):
        p = self._param(1.5)
        p.tensor.grad = np.array([2.0])
        sgd_step([p], lr=0.0, momentum=0.9, weight_decay=0.01)
        assert p.data[0] == 1.5

    def test_single_step(self):
        p = self._param(1.0)
        p.tensor.grad = np.array([1.0])
        sgd_step([p], lr=0.1)
        assert p.data[0] == pytest.approx(0.9)

    def test_momentum_matches_unrolled_recurrence(self):
        rng = np.random.default_rng(20)
        grads = rng.standard_normal(4)
        p = self._param(0.7)
        for g in grads:
            p.tensor.grad = np.array([g])
            sgd_step([p], lr=0.05, momentum=0.9, weight_decay=0.001)
        expected = unrolled_momentum_sgd(0.7, grads, 0.05, 0.9, 0.001)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)

    def test_missing_gradient_names_parameter(self):
        p = Parameter("enc.weird", np.zeros(3))
        with pytest.raises(ValueError, match="enc.weird"):
            sgd_step([p], lr=0.1)

    def test_grads_cleared_after_step(self):
        p = self._param(1.0)
        p.tensor.grad = np.array([1.0])
        sgd_step([p], lr=0.1)
        assert p.tensor.grad is None


class TestStructuralOps:
    def test_concat_and_grad(self):
        rng = np.random.default_rng(21)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 2))

        def build(at, bt):
            return random_projection_scalar(
                concat([at, bt], axis=1), np.random.default_rng(22)
            )

        check_gradients(build, [a, b], rel_tol=1e-4)

    def test_stack_and_grad(self):
        rng = np.random.default_rng(23)
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 2))

        def build(at, bt):
            return random_projection_scalar(
                stack([at, bt], axis=0), np.random.default_rng(24)
            )

        check_gradients(build, [a, b], rel_tol=1e-4)

    def test_getitem_grad(self):
        rng = np.random.default_rng(25)
        x = rng.standard_normal((4, 3, 2))

        def build(xt):
            return random_projection_scalar(xt[1], np.random.default_rng(26))

        check_gradients(build, [x], rel_tol=1e-4)

    def test_matmul_batched_grad(self):
        rng = np.random.default_rng(27)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 3))

        def build(at, bt):
            return random_projection_scalar(matmul(at, bt), np.random.default_rng(28))

        check_gradients(build, [a, b], rel_tol=1e-4)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(29)
        x = rng.standard_normal((5, 7)) * 3
        s = softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)

    def test_softmax_grad(self):
        rng = np.random.default_rng(30)
        x = rng.standard_normal((3, 4))

        def build(xt):
            return random_projection_scalar(softmax(xt, axis=-1), np.random.default_rng(31))

        check_gradients(build, [x], rel_tol=1e-4)

    def test_broadcast_binary_grad(self):
        rng = np.random.default_rng(32)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)

        def build(at, bt):
            return random_projection_scalar(at * bt + bt, np.random.default_rng(33))

        check_gradients(build, [a, b], rel_tol=1e-4)


class TestGraphMechanics:
    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._parents == ()

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x  # x appears twice
        y.backward()
        assert x.grad[0] == pytest.approx(6.0)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_xavier_bounds_and_determinism(self):
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        w1 = xavier_uniform((3, 3, 2, 4), rng1)
        w2 = xavier_uniform((3, 3, 2, 4), rng2)
        np.testing.assert_array_equal(w1, w2)
        limit = np.sqrt(6.0 / (9 * 2 + 9 * 4))
        assert np.all(np.abs(w1) <= limit)
