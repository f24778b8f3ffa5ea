import itertools

import numpy as np
import pytest
import torch

from sparse3d.tensor_core import (ConvSpec, FeatureMap, WeightTensor5D, conv3d_dense, conv3d_gemm, conv_output_dims,
                                  flops_count, partition)


def loop_conv3d(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1), padding=(0, 0, 0), bias=None) -> np.ndarray:
    """Plain python reference with the (n, kd, kh, kw) accumulation order."""
    x = np.pad(x, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2, (padding[2],) * 2))
    B, N, D, H, W = x.shape
    M, _, K_d, K_h, K_w = w.shape
    D_o, H_o, W_o = ((D - K_d) // stride[0] + 1, (H - K_h) // stride[1] + 1, (W - K_w) // stride[2] + 1)
    out = np.zeros((B, M, D_o, H_o, W_o))
    for b, m, od, oh, ow in itertools.product(range(B), range(M), range(D_o), range(H_o), range(W_o)):
        acc = 0.0
        for n, kd, kh, kw in itertools.product(range(N), range(K_d), range(K_h), range(K_w)):
            acc += w[m, n, kd, kh, kw] * x[b, n, od * stride[0] + kd, oh * stride[1] + kh, ow * stride[2] + kw]
        out[b, m, od, oh, ow] = acc + (0.0 if bias is None else bias[m])
    return out


def random_layer(rng, x_dims, w_dims):
    return (FeatureMap.from_numpy(rng.standard_normal(x_dims)), WeightTensor5D.from_numpy(rng.standard_normal(w_dims)))


class TestConv3dDense():

    def test_all_ones(self):
        x = FeatureMap(torch.ones(1, 1, 3, 3, 3, dtype=torch.float64))
        w = WeightTensor5D(torch.ones(1, 1, 3, 3, 3, dtype=torch.float64))
        out = conv3d_dense(x, w, ConvSpec())
        assert out.dims == (1, 1, 1, 1, 1)
        assert out.as_numpy()[0, 0, 0, 0, 0] == 27.0

    def test_identity_kernel(self):
        rng = np.random.RandomState(0)
        x = FeatureMap.from_numpy(rng.standard_normal((2, 1, 3, 4, 5)))
        w = WeightTensor5D(torch.ones(1, 1, 1, 1, 1, dtype=torch.float64))
        np.testing.assert_array_equal(conv3d_dense(x, w, ConvSpec()).as_numpy(), x.as_numpy())

    def test_matches_loop_reference_bit_exact(self):
        rng = np.random.RandomState(0)
        x, w = random_layer(rng, (1, 3, 5, 6, 6), (2, 3, 3, 3, 3))
        expected = loop_conv3d(x.as_numpy(), w.as_numpy())
        np.testing.assert_array_equal(conv3d_dense(x, w, ConvSpec()).as_numpy(), expected)

    def test_stride_padding_bias(self):
        rng = np.random.RandomState(1)
        x, w = random_layer(rng, (2, 2, 4, 5, 5), (3, 2, 2, 3, 3))
        bias = rng.standard_normal(3)
        spec = ConvSpec((1, 2, 2), (1, 1, 0), torch.from_numpy(bias))
        expected = loop_conv3d(x.as_numpy(), w.as_numpy(), spec.stride, spec.padding, bias)
        np.testing.assert_allclose(conv3d_dense(x, w, spec).as_numpy(), expected, rtol=1e-12, atol=1e-12)

    def test_linearity(self):
        rng = np.random.RandomState(2)
        x, w = random_layer(rng, (1, 2, 4, 4, 4), (2, 2, 3, 3, 3))
        y = FeatureMap.from_numpy(rng.standard_normal((1, 2, 4, 4, 4)))
        a, b = 0.7, -1.3
        combined = FeatureMap.from_numpy(a * x.as_numpy() + b * y.as_numpy())
        spec = ConvSpec(padding=(1, 1, 1))
        expected = a * conv3d_dense(x, w, spec).as_numpy() + b * conv3d_dense(y, w, spec).as_numpy()
        np.testing.assert_allclose(conv3d_dense(combined, w, spec).as_numpy(), expected, rtol=1e-10, atol=1e-10)

    def test_channel_mismatch_is_rejected(self):
        rng = np.random.RandomState(0)
        x, w = random_layer(rng, (1, 2, 3, 3, 3), (1, 3, 1, 1, 1))
        with pytest.raises(ValueError, match='channels'):
            conv3d_dense(x, w, ConvSpec())

    def test_kernel_larger_than_input_is_rejected(self):
        rng = np.random.RandomState(0)
        x, w = random_layer(rng, (1, 1, 2, 5, 5), (1, 1, 3, 3, 3))
        with pytest.raises(ValueError):
            conv3d_dense(x, w, ConvSpec())

    def test_invalid_spec_is_rejected(self):
        with pytest.raises(ValueError):
            ConvSpec(stride=(0, 1, 1))
        with pytest.raises(ValueError):
            ConvSpec(padding=(-1, 0, 0))

    def test_bias_length_is_checked(self):
        rng = np.random.RandomState(0)
        x, w = random_layer(rng, (1, 1, 3, 3, 3), (2, 1, 1, 1, 1))
        with pytest.raises(ValueError, match='Bias'):
            conv3d_dense(x, w, ConvSpec(bias=torch.zeros(3)))


class TestConv3dGemm():

    @pytest.mark.parametrize('g_M, g_N', [(4, 4), (3, 2), (1, 1)])
    def test_matches_dense(self, g_M, g_N):
        rng = np.random.RandomState(3)
        x, w = random_layer(rng, (1, 4, 4, 8, 8), (4, 4, 3, 3, 3))
        part = partition(w.dims, g_M, g_N)
        np.testing.assert_allclose(conv3d_gemm(x, w, ConvSpec(), part).as_numpy(),
                                   conv3d_dense(x, w, ConvSpec()).as_numpy(), rtol=1e-12, atol=1e-12)

    def test_zero_input_gives_bias(self):
        w = WeightTensor5D.from_numpy(np.random.RandomState(0).standard_normal((3, 2, 1, 3, 3)))
        bias = torch.tensor([1., -2., 0.5], dtype=torch.float64)
        out = conv3d_gemm(FeatureMap(torch.zeros(1, 2, 2, 4, 4, dtype=torch.float64)), w, ConvSpec(bias=bias))
        np.testing.assert_array_equal(out.as_numpy(), np.broadcast_to(bias.numpy()[None, :, None, None, None],
                                                                      out.dims))

    def test_strided_padded_2d_case(self):
        rng = np.random.RandomState(4)
        x, w = random_layer(rng, (2, 3, 1, 7, 7), (5, 3, 1, 3, 3))
        spec = ConvSpec((1, 2, 2), (0, 1, 1), torch.from_numpy(rng.standard_normal(5)))
        np.testing.assert_allclose(conv3d_gemm(x, w, spec, partition(w.dims, 2, 2)).as_numpy(),
                                   conv3d_dense(x, w, spec).as_numpy(), rtol=1e-12, atol=1e-12)


class TestFlopsCount():

    def test_spec_example(self):
        w = WeightTensor5D(torch.zeros(2, 3, 3, 3, 3))
        assert flops_count(w, ConvSpec(), (1, 3, 6, 6, 6)) == 20736

    def test_single_weight(self):
        assert flops_count(WeightTensor5D(torch.zeros(1, 1, 1, 1, 1)), ConvSpec(), (1, 1, 1, 1, 1)) == 2

    def test_2d_case(self):
        assert flops_count(WeightTensor5D(torch.zeros(1, 1, 1, 3, 3)), ConvSpec(), (1, 1, 1, 4, 4)) == 72

    @pytest.mark.parametrize('x_dims, w_dims, stride, padding', [
        ((1, 3, 6, 6, 6), (2, 3, 3, 3, 3), (1, 1, 1), (0, 0, 0)),
        ((2, 2, 4, 7, 5), (3, 2, 2, 3, 1), (2, 1, 2), (1, 0, 1)),
        ((1, 1, 1, 4, 4), (1, 1, 1, 3, 3), (1, 1, 1), (0, 0, 0)),
    ])
    def test_equals_instrumented_oracle(self, x_dims, w_dims, stride, padding):
        rng = np.random.RandomState(0)
        x, w = random_layer(rng, x_dims, w_dims)
        spec = ConvSpec(stride, padding)
        _, macs = conv3d_dense(x, w, spec, return_macs=True)
        assert flops_count(w, spec, x_dims) == 2 * macs

    def test_masked(self):
        w = WeightTensor5D(torch.zeros(2, 1, 1, 1, 2))
        mask = torch.tensor([True, False, False, False]).reshape(2, 1, 1, 1, 2)
        assert flops_count(w, ConvSpec(), (1, 1, 1, 1, 3), mask) == 2 * 1 * 2

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            flops_count(WeightTensor5D(torch.zeros(1, 2, 1, 1, 1)), ConvSpec(), (1, 3, 1, 1, 1))


class TestPartition():

    @pytest.mark.parametrize('M, N, g_M, g_N, P, Q', [(8, 8, 4, 4, 2, 2), (6, 4, 4, 4, 2, 1), (64, 64, 8, 4, 8, 16)])
    def test_group_counts(self, M, N, g_M, g_N, P, Q):
        part = partition((M, N, 3, 3, 3), g_M, g_N)
        assert (part.P, part.Q) == (P, Q)
        assert part.K_s == 27

    def test_ragged_last_row(self):
        part = partition((6, 4, 3, 3, 3), 4, 4)
        assert part.row_sizes().tolist() == [4, 2]
        assert part.filter_range(1) == (4, 6)

    def test_groups_cover_disjointly(self):
        part = partition((7, 5, 1, 1, 1), 3, 2)
        seen = {}
        for p in range(part.P):
            for q in range(part.Q):
                for m in range(*part.filter_range(p)):
                    for n in range(*part.channel_range(q)):
                        assert (m, n) not in seen
                        seen[(m, n)] = (p, q)
        assert len(seen) == 7 * 5
        assert all(part.group_of(m, n) == pq for (m, n), pq in seen.items())

    def test_invalid_group_size(self):
        with pytest.raises(ValueError):
            partition((4, 4, 3, 3, 3), 0, 4)

    def test_output_dims(self):
        assert conv_output_dims((8, 12, 12), (3, 3, 3), (1, 2, 2), (1, 1, 1)) == (8, 6, 6)
