"""Neural-op contracts: hand oracles, naive-loop convolution, gradients."""

import math

import numpy as np
import pytest

import lnl.tensor as T
from lnl.gradcheck import check_gradient
from lnl.nn import (
    DepthwiseConv2d,
    LayerNorm,
    Linear,
    Mlp,
    MultiHeadSelfAttention,
    cross_entropy,
    gelu,
    image_to_seq,
    seq_to_image,
    softmax,
)
from lnl.tensor import ShapeError, Tensor


def rng_(seed=0):
    return np.random.default_rng(seed)


class TestLinear:
    def test_identity_weights(self):
        lin = Linear(3, 3, rng_())
        lin.weight.data = np.eye(3)
        lin.bias.data = np.zeros(3)
        x = rng_(1).normal(size=(2, 3))
        np.testing.assert_allclose(lin.forward(Tensor(x)).data, x)

    def test_hand_computation(self):
        lin = Linear(2, 1, rng_())
        lin.weight.data = np.array([[1.0, 1.0]])
        lin.bias.data = np.array([0.5])
        out = lin.forward(Tensor([1.0, 2.0]))
        np.testing.assert_allclose(out.data, [3.5])

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            Linear(2, 4, rng_()).forward(Tensor(np.zeros((5, 3))))

    def test_gradients(self):
        lin = Linear(3, 2, rng_(2))
        x = rng_(3).normal(size=(4, 3))

        def f(ts):
            lin.weight, lin.bias = ts[0], ts[1]
            return T.reduce_sum(T.mul(lin.forward(ts[2]), lin.forward(ts[2])))

        check_gradient(
            f,
            [rng_(4).normal(size=(2, 3)), rng_(5).normal(size=2), x],
        )


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        ln = LayerNorm(4)
        out = ln.forward(Tensor(np.full((2, 4), 3.7)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_frozen_population_values(self):
        # mean 2.5, population std sqrt(1.25)
        ln = LayerNorm(4, eps=1e-12)
        out = ln.forward(Tensor([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_allclose(
            out.data, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4
        )

    def test_zero_gamma_broadcasts_beta(self):
        ln = LayerNorm(3)
        ln.gamma.data = np.zeros(3)
        ln.beta.data = np.array([1.0, 2.0, 3.0])
        out = ln.forward(Tensor(rng_(6).normal(size=(4, 3))))
        np.testing.assert_allclose(out.data, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_mean_zero_unit_variance(self):
        ln = LayerNorm(16)
        x = rng_(7).normal(2.0, 3.0, size=(5, 16))
        out = ln.forward(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gradients(self):
        ln = LayerNorm(5)
        x = rng_(8).normal(size=(3, 5))

        def f(ts):
            ln.gamma, ln.beta = ts[1], ts[2]
            return T.reduce_sum(T.exp(ln.forward(ts[0])))

        check_gradient(f, [x, rng_(9).normal(size=5), rng_(10).normal(size=5)])


class TestSoftmaxGeluCrossEntropy:
    def test_softmax_rows_sum_to_one(self):
        out = softmax(Tensor(rng_(11).normal(size=(2, 3, 7))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_gelu_reference_points(self):
        # direct evaluation of 0.5 x (1 + erf(x / sqrt 2))
        out = gelu(Tensor([0.0, 1.0, -1.0]))
        expect = np.array([0.0, 0.8413447460685429, -0.15865525393145707])
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_cross_entropy_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_cross_entropy_confident(self):
        # -log sigmoid(10) evaluated directly
        loss = cross_entropy(Tensor([[10.0, 0.0]]), [0])
        assert abs(loss.item() - 4.5398899216870535e-05) < 1e-12

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), [-1])
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradients(self):
        x = rng_(12).normal(size=(2, 6))
        check_gradient(lambda ts: T.reduce_sum(T.mul(softmax(ts[0]), ts[0])), [x])
        check_gradient(lambda ts: T.reduce_sum(gelu(ts[0])), [x])
        labels = np.array([1, 4])
        check_gradient(lambda ts: cross_entropy(ts[0], labels), [x])


class TestAttention:
    def test_single_token_attends_to_itself(self):
        msa = MultiHeadSelfAttention(8, 2, rng_(13))
        _, attn = msa.forward(Tensor(rng_(14).normal(size=(3, 1, 8))))
        np.testing.assert_allclose(attn.data, 1.0)

    def test_rows_sum_to_one(self):
        msa = MultiHeadSelfAttention(12, 3, rng_(15))
        _, attn = msa.forward(Tensor(rng_(16).normal(size=(2, 5, 12))))
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_uniform_attention_averages_values(self):
        # zero Q/K make softmax uniform; identity V/out expose the mean
        msa = MultiHeadSelfAttention(4, 1, rng_(17))
        msa.q.weight.data[:] = 0.0
        msa.k.weight.data[:] = 0.0
        msa.v.weight.data = np.eye(4)
        msa.v.bias.data[:] = 0.0
        msa.out.weight.data = np.eye(4)
        msa.out.bias.data[:] = 0.0
        x = rng_(18).normal(size=(2, 6, 4))
        out, _ = msa.forward(Tensor(x))
        expect = np.repeat(x.mean(axis=1, keepdims=True), 6, axis=1)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ShapeError):
            MultiHeadSelfAttention(10, 3, rng_())

    def test_attention_tensor_not_detached(self):
        msa = MultiHeadSelfAttention(8, 2, rng_(19))
        x = Tensor(rng_(20).normal(size=(1, 4, 8)), requires_grad=True)
        _, attn = msa.forward(x)
        T.reduce_sum(T.mul(attn, attn)).backward()
        assert msa.q.weight.grad is not None
        assert x.grad is not None and np.abs(x.grad).max() > 0

    def test_gradients_end_to_end(self):
        msa = MultiHeadSelfAttention(6, 2, rng_(21))
        x = rng_(22).normal(size=(2, 3, 6))
        check_gradient(
            lambda ts: T.reduce_sum(T.mul(msa.forward(ts[0])[0], ts[0])), [x]
        )


def conv_quadruple_loop(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Naive per-channel correlation with zero padding, the slow oracle."""
    b, c, h, ww_ = x.shape
    k = w.shape[-1]
    pad = (k - 1) // 2
    out = np.zeros_like(x)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(ww_):
                    acc = 0.0
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - pad, j + dj - pad
                            if 0 <= ii < h and 0 <= jj < ww_:
                                acc += x[bi, ci, ii, jj] * w[ci, 0, di, dj]
                    out[bi, ci, i, j] = acc
    return out


class TestDepthwiseConv:
    def test_identity_kernel(self):
        conv = DepthwiseConv2d(3, 3, rng_(23))
        conv.kernel.data[:] = 0.0
        conv.kernel.data[:, 0, 1, 1] = 1.0
        x = rng_(24).normal(size=(2, 3, 5, 5))
        np.testing.assert_array_equal(conv.forward(Tensor(x)).data, x)

    def test_all_ones_kernel_on_ones(self):
        conv = DepthwiseConv2d(1, 3, rng_(25))
        conv.kernel.data[:] = 1.0
        out = conv.forward(Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_channel_mismatch(self):
        conv = DepthwiseConv2d(8, 3, rng_())
        with pytest.raises(ShapeError):
            conv.forward(Tensor(np.zeros((1, 4, 4, 4))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            DepthwiseConv2d(4, 2, rng_())

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_naive_loop(self, k):
        rng = rng_(26 + k)
        for c, hw in [(1, 4), (3, 6), (4, 5)]:
            conv = DepthwiseConv2d(c, k, rng)
            x = rng.normal(size=(2, c, hw, hw))
            got = conv.forward(Tensor(x)).data
            want = conv_quadruple_loop(x, conv.kernel.data)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradients(self):
        conv = DepthwiseConv2d(2, 3, rng_(30))
        x = rng_(31).normal(size=(2, 2, 4, 4))

        def f(ts):
            conv.kernel = ts[1]
            return T.reduce_sum(T.mul(conv.forward(ts[0]), conv.forward(ts[0])))

        check_gradient(f, [x, rng_(32).normal(size=(2, 1, 3, 3))])


class TestSeqImageReshape:
    def test_roundtrip_bit_identical(self):
        z = rng_(33).normal(size=(2, 4, 3))
        back = image_to_seq(seq_to_image(Tensor(z)))
        assert (back.data == z).all()

    def test_row_major_layout(self):
        # token r*side + c must land at spatial (r, c)
        z = np.arange(9.0).reshape(1, 9, 1)
        img = seq_to_image(Tensor(z))
        np.testing.assert_array_equal(img.data[0, 0], np.arange(9.0).reshape(3, 3))

    def test_non_square_token_count(self):
        with pytest.raises(ShapeError):
            seq_to_image(Tensor(np.zeros((1, 5, 2))))

    def test_gradients_flow_through(self):
        z = rng_(34).normal(size=(1, 4, 2))
        check_gradient(
            lambda ts: T.reduce_sum(T.exp(image_to_seq(seq_to_image(ts[0])))), [z]
        )


class TestMlp:
    def test_gradients(self):
        mlp = Mlp(4, 8, rng_(35))
        x = rng_(36).normal(size=(3, 4))
        check_gradient(lambda ts: T.reduce_sum(mlp.forward(ts[0])), [x])

    def test_module_traversal_finds_all_params(self):
        mlp = Mlp(4, 8, rng_(37))
        names = dict(mlp.named_parameters())
        assert set(names) == {
            "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"
        }
        assert mlp.param_count() == 4 * 8 + 8 + 8 * 4 + 4
