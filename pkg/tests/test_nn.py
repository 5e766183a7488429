"""Layer semantics against hand values and the naive convolution oracle."""

import math

import numpy as np
import pytest

from conftest import naive_conv2d
from ctanet import nn
from ctanet import tensor as T
from ctanet.errors import ConfigError, DataError, ShapeError
from ctanet.tensor import Tensor


def make_conv(w, b=None, stride=1, padding=0, groups=1):
    return nn.Conv2dParams(Tensor(np.asarray(w, dtype=np.float64)),
                           None if b is None else Tensor(np.asarray(b, dtype=np.float64)),
                           stride=stride, padding=padding, groups=groups)


class TestConv2d:
    def test_single_pixel(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        p = make_conv(np.full((1, 1, 1, 1), 3.0), b=[1.0])
        assert nn.conv2d(x, p).data.reshape(()) == 7.0

    def test_all_ones_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        p = make_conv(np.ones((1, 1, 3, 3)))
        assert nn.conv2d(x, p).data.reshape(()) == 9.0

    def test_random_against_naive(self):
        x = T.uniform([1, 2, 5, 5], -1, 1, seed=3, dtype="f64")
        p = nn.conv2d_init(2, 3, 3, padding=1, seed=4, dtype="f64")
        want = naive_conv2d(x.data, p.weight.data, p.bias.data, stride=1, pad=1)
        assert np.abs(nn.conv2d(x, p).data - want).max() <= 1e-12

    def test_output_extent_formula(self):
        x = T.uniform([1, 1, 9, 9], seed=1, dtype="f64")
        p = nn.conv2d_init(1, 1, 3, stride=2, padding=1, seed=2, dtype="f64")
        out = nn.conv2d(x, p)
        assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, 5)

    def test_channel_mismatch(self):
        p = nn.conv2d_init(2, 2, 3, seed=1)
        with pytest.raises(ShapeError):
            nn.conv2d(T.ones([1, 3, 5, 5]), p)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            nn.conv2d_init(2, 2, 4, seed=1)
        with pytest.raises(ShapeError):
            nn.conv2d(T.ones([1, 1, 5, 5]), make_conv(np.ones((1, 1, 2, 2))))

    def test_kernel_larger_than_padded_input(self):
        p = nn.conv2d_init(1, 1, 5, seed=1, dtype="f64")
        with pytest.raises(ShapeError):
            nn.conv2d(T.ones([1, 1, 3, 3], "f64"), p)


class TestDepthwisePointwise:
    def test_depthwise_constant_channels(self):
        x = np.stack([np.full((3, 3), 1.0), np.full((3, 3), 2.0)])[None]
        p = make_conv(np.ones((2, 1, 3, 3)), groups=2)
        out = nn.depthwise_conv2d(Tensor(x), p)
        assert out.shape == (1, 2, 1, 1)
        assert out.data.reshape(2).tolist() == [9.0, 18.0]

    def test_pointwise_identity(self):
        x = T.uniform([2, 3, 4, 4], seed=5, dtype="f64")
        p = make_conv(np.eye(3).reshape(3, 3, 1, 1))
        assert np.array_equal(nn.pointwise_conv2d(x, p).data, x.data)

    def test_separable_pair_parameter_count(self):
        # depthwise M x D x D plus pointwise M x N weights
        M, N, Dk = 3, 8, 3
        dw = nn.conv2d_init(M, M, Dk, groups=M, bias=False, seed=1)
        pw = nn.conv2d_init(M, N, 1, bias=False, seed=2)
        total = dw.weight.size + pw.weight.size
        assert total == M * Dk * Dk + M * N == 51
        dense = nn.conv2d_init(M, N, Dk, bias=False, seed=3)
        assert dense.weight.size == M * N * Dk * Dk == 216

    def test_separable_composition_equals_rank1_full_conv(self):
        # full kernel W[o,c,:,:] = P[o,c] * K[c,:,:] factorizes exactly
        rng = np.random.default_rng(0)
        C, OC, k = 3, 4, 3
        K = rng.standard_normal((C, k, k))
        P = rng.standard_normal((OC, C))
        x = rng.standard_normal((2, C, 6, 6))
        dw = make_conv(K[:, None], groups=C, padding=1)
        pw = make_conv(P[:, :, None, None])
        got = nn.pointwise_conv2d(nn.depthwise_conv2d(Tensor(x), dw), pw).data
        full = make_conv(P[:, :, None, None] * K[None, :, :, :], padding=1)
        want = nn.conv2d(Tensor(x), full).data
        assert np.abs(got - want).max() <= 1e-12


class TestLinear:
    def test_identity(self):
        x = T.uniform([3, 4], seed=6, dtype="f64")
        p = nn.LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(nn.linear(x, p).data, x.data)

    def test_hand_case(self):
        p = nn.LinearParams(Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([0.5])))
        assert nn.linear(Tensor([1.0, 2.0]), p).data.tolist() == [3.5]

    def test_against_matmul_oracle(self):
        x = T.uniform([2, 5, 4], -1, 1, seed=7, dtype="f64")
        p = nn.linear_init(4, 6, seed=8, dtype="f64")
        want = x.data @ p.weight.data.T + p.bias.data
        assert np.abs(nn.linear(x, p).data - want).max() <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nn.linear(T.ones([2, 3]), nn.linear_init(4, 2, seed=1))


class TestLayerNorm:
    def test_constant_slice_zeros(self):
        p = nn.layer_norm_init(4, dtype="f64")
        out = nn.layer_norm(Tensor(np.full((2, 4), 3.0)), p)
        assert np.abs(out.data).max() == 0.0  # eps keeps this finite

    def test_hand_evaluation(self):
        p = nn.layer_norm_init(3, dtype="f64")
        out = nn.layer_norm(Tensor([[1.0, 2.0, 3.0]]), p)
        sigma = math.sqrt(2.0 / 3.0 + 1e-5)
        want = np.array([-1.0, 0.0, 1.0]) / sigma
        assert np.abs(out.data[0] - want).max() < 1e-9
        assert np.abs(out.data[0] - np.array([-1.2247, 0.0, 1.2247])).max() < 1e-4

    def test_gamma_zero_gives_beta(self):
        p = nn.LayerNormParams(Tensor(np.zeros(3)), Tensor(np.full(3, 2.5)), 1e-5)
        out = nn.layer_norm(T.uniform([4, 3], seed=9, dtype="f64"), p)
        assert np.abs(out.data - 2.5).max() == 0.0

    def test_normalization_statistics(self):
        p = nn.layer_norm_init(32, dtype="f64")
        x = T.uniform([6, 32], -4, 4, seed=10, dtype="f64")
        out = nn.layer_norm(x, p).data
        assert np.abs(out.mean(-1)).max() <= 1e-6
        assert np.abs(out.var(-1) - 1).max() <= 1e-4


class TestActivationAndLoss:
    def test_gelu_zero(self):
        assert nn.gelu(Tensor([0.0])).data.tolist() == [0.0]

    def test_gelu_reference_values(self):
        # 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        for v in (-1.0, 0.5, 2.0):
            want = 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))
            assert abs(nn.gelu(Tensor([v])).item() - want) < 1e-12

    def test_uniform_logits_loss(self):
        loss = nn.cross_entropy(Tensor([[0.0, 0.0]]), [0])
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_saturated_logits(self):
        loss = nn.cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert loss.item() < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            nn.cross_entropy(Tensor([[0.0, 0.0]]), [2])
        with pytest.raises(DataError):
            nn.cross_entropy(Tensor([[0.0, 0.0]]), [-1])

    def test_batch_mean(self):
        loss = nn.cross_entropy(Tensor([[0.0, 0.0], [1000.0, 0.0]]), [0, 0])
        assert abs(loss.item() - math.log(2.0) / 2) < 1e-9
