"""Dense tensors, the brute-force 3D convolution oracle, the GEMM formulation and FLOPs accounting.

Weights use the torch layout `(M, N, K_d, K_h, K_w)` and feature maps `(batch, channels, depth, height, width)`.
"""
from dataclasses import dataclass, field
import math
from typing import Optional, Sequence, Tuple, Union

import numba
import numpy as np
import torch


Triple = Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class WeightTensor5D:
    """The weights `W_l` of one 3D CONV layer.

    Parameters
    ----------
    data : torch.Tensor
        [M, N, K_d, K_h, K_w] weights (64-bit for verification, 32-bit for compiled artifacts).
    layer_id : int, optional
        Position of the layer in its model, by default 0.
    """
    data: torch.Tensor
    layer_id: int = 0

    def __post_init__(self):
        if self.data.dim() != 5:
            raise ValueError(f'Weights must have 5 dims (M, N, K_d, K_h, K_w), got shape {tuple(self.data.shape)}')
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f'All weight dims must be >= 1, got shape {tuple(self.data.shape)}')

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def K_d(self) -> int:
        return self.data.shape[2]

    @property
    def K_h(self) -> int:
        return self.data.shape[3]

    @property
    def K_w(self) -> int:
        return self.data.shape[4]

    @property
    def K_s(self) -> int:
        return self.K_d * self.K_h * self.K_w

    @property
    def dims(self) -> Tuple[int, int, int, int, int]:
        """Dims in the order (M, N, K_h, K_w, K_d)."""
        return (self.M, self.N, self.K_h, self.K_w, self.K_d)

    @property
    def kernel(self) -> Triple:
        return (self.K_d, self.K_h, self.K_w)

    @staticmethod
    def from_numpy(array: np.ndarray, layer_id: int = 0) -> 'WeightTensor5D':
        return WeightTensor5D(torch.from_numpy(np.ascontiguousarray(array)), layer_id)

    def as_numpy(self, dtype=np.float64) -> np.ndarray:
        return np.ascontiguousarray(self.data.detach().cpu().numpy().astype(dtype, copy=False))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Input/output activations of shape [batch, channels, depth, height, width]."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 5:
            raise ValueError(f'Feature maps must have 5 dims (batch, C, D, H, W), got {tuple(self.data.shape)}')
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f'All feature map dims must be >= 1, got {tuple(self.data.shape)}')

    @property
    def dims(self) -> Tuple[int, int, int, int, int]:
        return tuple(self.data.shape)

    @staticmethod
    def from_numpy(array: np.ndarray) -> 'FeatureMap':
        return FeatureMap(torch.from_numpy(np.ascontiguousarray(array)))

    def as_numpy(self, dtype=np.float64) -> np.ndarray:
        return np.ascontiguousarray(self.data.detach().cpu().numpy().astype(dtype, copy=False))


@dataclass(frozen=True)
class ConvSpec:
    """Stride, zero-padding and optional bias `b_l` of a 3D CONV layer (all triples in (d, h, w) order)."""
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    bias: Optional[torch.Tensor] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ValueError(f'Strides must be three values >= 1, got {self.stride}')
        if len(self.padding) != 3 or any(p < 0 for p in self.padding):
            raise ValueError(f'Padding must be three values >= 0, got {self.padding}')
        object.__setattr__(self, 'stride', tuple(int(s) for s in self.stride))
        object.__setattr__(self, 'padding', tuple(int(p) for p in self.padding))

    def output_dims(self, spatial: Sequence[int], kernel: Sequence[int]) -> Triple:
        return conv_output_dims(spatial, kernel, self.stride, self.padding)

    def bias_numpy(self, n_filters: int, dtype=np.float64) -> np.ndarray:
        if self.bias is None:
            return np.zeros(n_filters, dtype=dtype)
        if self.bias.numel() != n_filters:
            raise ValueError(f'Bias has {self.bias.numel()} entries but the layer has M={n_filters} filters')
        return np.ascontiguousarray(self.bias.detach().cpu().numpy().astype(dtype))


@dataclass(frozen=True)
class GroupPartition:
    """Partition of a layer's (filter, channel) pairs into kernel groups `G_{p,q}` of `g_M x g_N` kernels."""
    M: int
    N: int
    kernel: Triple
    g_M: int
    g_N: int

    @property
    def P(self) -> int:
        return math.ceil(self.M / self.g_M)

    @property
    def Q(self) -> int:
        return math.ceil(self.N / self.g_N)

    @property
    def K_s(self) -> int:
        return int(np.prod(self.kernel))

    def filter_range(self, p: int) -> Tuple[int, int]:
        return p * self.g_M, min(self.M, (p + 1) * self.g_M)

    def channel_range(self, q: int) -> Tuple[int, int]:
        return q * self.g_N, min(self.N, (q + 1) * self.g_N)

    def row_sizes(self) -> np.ndarray:
        """Actual number of filters in every group row (the last one may be ragged)."""
        return np.array([hi - lo for lo, hi in map(self.filter_range, range(self.P))], dtype=np.int64)

    def channel_sizes(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in map(self.channel_range, range(self.Q))], dtype=np.int64)

    def group_of(self, m: int, n: int) -> Tuple[int, int]:
        return m // self.g_M, n // self.g_N


def conv_output_dims(spatial: Sequence[int], kernel: Sequence[int], stride: Sequence[int],
                     padding: Sequence[int]) -> Triple:
    """Output extents `floor((D + 2p - K) / s) + 1` per spatial axis.

    Raises
    ------
    ValueError
        If the padded input is smaller than the kernel along any axis.
    """
    out = []
    for axis, (size, k, s, p) in enumerate(zip(spatial, kernel, stride, padding)):
        if size + 2 * p < k:
            raise ValueError(f'Padded extent {size + 2 * p} along axis {"dhw"[axis]} is smaller than the kernel '
                             f'extent {k}')
        out.append((size + 2 * p - k) // s + 1)
    return tuple(out)


def _check_conv_shapes(input: FeatureMap, weights: WeightTensor5D, spec: ConvSpec) -> Triple:
    if input.dims[1] != weights.N:
        raise ValueError(f'Input has {input.dims[1]} channels but the weights expect N={weights.N} '
                         f'(input {input.dims}, weights {tuple(weights.data.shape)})')
    out = spec.output_dims(input.dims[2:], weights.kernel)
    if min(out) < 1:
        raise ValueError(f'Output extent {out} is smaller than 1')
    return out


@numba.njit(cache=True)
def _conv3d_dense_kernel(x, w, bias, stride, out_dims):
    # Accumulation order is fixed (n, kd, kh, kw) so independent re-implementations match bit by bit
    B = x.shape[0]
    M, N, K_d, K_h, K_w = w.shape
    D_o, H_o, W_o = out_dims
    s_d, s_h, s_w = stride
    out = np.empty((B, M, D_o, H_o, W_o), dtype=x.dtype)
    macs = 0
    for b in range(B):
        for m in range(M):
            for od in range(D_o):
                for oh in range(H_o):
                    for ow in range(W_o):
                        acc = 0.0
                        for n in range(N):
                            for kd in range(K_d):
                                for kh in range(K_h):
                                    for kw in range(K_w):
                                        acc += w[m, n, kd, kh, kw] * x[b, n, od * s_d + kd, oh * s_h + kh,
                                                                         ow * s_w + kw]
                                        macs += 1
                        out[b, m, od, oh, ow] = acc + bias[m]
    return out, macs


def pad_input(x: np.ndarray, padding: Sequence[int]) -> np.ndarray:
    p_d, p_h, p_w = padding
    if p_d == p_h == p_w == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p_d, p_d), (p_h, p_h), (p_w, p_w)))


def conv3d_dense(input: FeatureMap, weights: WeightTensor5D, spec: ConvSpec,
                 return_macs: bool = False) -> Union[FeatureMap, Tuple[FeatureMap, int]]:
    """Naive 7-loop reference 3D convolution in 64-bit reals.

    Parameters
    ----------
    input : FeatureMap
        [batch, N, D, H, W] input.
    weights : WeightTensor5D
        [M, N, K_d, K_h, K_w] weights.
    spec : ConvSpec
        Stride, zero-padding and optional bias.
    return_macs : bool, optional
        If True also the number of executed multiply-accumulates is returned, by default False.

    Returns
    -------
    Union[FeatureMap, Tuple[FeatureMap, int]]
        [batch, M, D_o, H_o, W_o] output and optionally the MAC counter.
    """
    out_dims = _check_conv_shapes(input, weights, spec)
    x = pad_input(input.as_numpy(np.float64), spec.padding)
    w = weights.as_numpy(np.float64)
    out, macs = _conv3d_dense_kernel(x, w, spec.bias_numpy(weights.M), tuple(spec.stride),
                                     tuple(out_dims))
    result = FeatureMap.from_numpy(out)
    if return_macs:
        return result, int(macs)
    return result


def extract_patches(x: torch.Tensor, kernel: Sequence[int], stride: Sequence[int]) -> torch.Tensor:
    """Gathers the input patches of a (padded) input.

    Returns
    -------
    torch.Tensor
        [batch, N * K_s, D_o * H_o * W_o] patch matrix where the rows follow the weight layout (n, kd, kh, kw).
    """
    patches = x.unfold(2, kernel[0], stride[0]).unfold(3, kernel[1], stride[1]).unfold(4, kernel[2], stride[2])
    # [B, N, D_o, H_o, W_o, K_d, K_h, K_w] -> [B, N, K_d, K_h, K_w, D_o, H_o, W_o]
    B, N, D_o, H_o, W_o = patches.shape[:5]
    patches = patches.permute(0, 1, 5, 6, 7, 2, 3, 4)
    return patches.reshape(B, N * int(np.prod(kernel)), D_o * H_o * W_o)


def conv3d_gemm(input: FeatureMap, weights: WeightTensor5D, spec: ConvSpec,
                partition: Optional[GroupPartition] = None) -> FeatureMap:
    """3D convolution as patch gathering plus one matrix multiply per kernel group.

    Every kernel group `G_{p,q}` forms a `g_M x (g_N * K_s)` weight matrix that multiplies the matching rows of the
    patch matrix. Without a partition a single group spans the whole layer.
    """
    out_dims = _check_conv_shapes(input, weights, spec)
    if partition is None:
        partition = partition_dims(weights.dims, weights.M, weights.N)
    dtype = input.data.dtype if input.data.dtype == torch.float32 else torch.float64
    x = torch.nn.functional.pad(
        input.data.to(dtype),
        (spec.padding[2], spec.padding[2], spec.padding[1], spec.padding[1], spec.padding[0], spec.padding[0])
    )
    patches = extract_patches(x, weights.kernel, spec.stride)
    w = weights.data.to(dtype).reshape(weights.M, weights.N * weights.K_s)
    K_s = weights.K_s

    B = x.shape[0]
    out = torch.zeros(B, weights.M, patches.shape[-1], dtype=dtype)
    for p in range(partition.P):
        m_lo, m_hi = partition.filter_range(p)
        for q in range(partition.Q):
            n_lo, n_hi = partition.channel_range(q)
            group = w[m_lo:m_hi, n_lo * K_s:n_hi * K_s]
            out[:, m_lo:m_hi] += group @ patches[:, n_lo * K_s:n_hi * K_s]
    if spec.bias is not None:
        out += spec.bias.to(dtype)[None, :, None]
    return FeatureMap(out.reshape(B, weights.M, *out_dims))


def flops_count(weights: WeightTensor5D, spec: ConvSpec, input_dims: Sequence[int],
                weight_mask: Optional[torch.Tensor] = None) -> int:
    """FLOPs (2 x multiply-accumulates) of a 3D CONV layer.

    Parameters
    ----------
    weights : WeightTensor5D
        The layer weights (only the shape is used).
    spec : ConvSpec
        Stride and padding.
    input_dims : Sequence[int]
        (batch, N, D, H, W) of the input.
    weight_mask : torch.Tensor, optional
        Boolean tensor of the weights' shape; only surviving positions are counted, by default None.

    Returns
    -------
    int
        The exact FLOPs.
    """
    if len(input_dims) != 5:
        raise ValueError(f'Input dims must be (batch, N, D, H, W), got {tuple(input_dims)}')
    if input_dims[1] != weights.N:
        raise ValueError(f'Input has {input_dims[1]} channels but the weights expect N={weights.N}')
    out = spec.output_dims(input_dims[2:], weights.kernel)
    if weight_mask is None:
        n_weights = weights.data.numel()
    else:
        if tuple(weight_mask.shape) != tuple(weights.data.shape):
            raise ValueError(f'Mask shape {tuple(weight_mask.shape)} does not match weights '
                             f'{tuple(weights.data.shape)}')
        n_weights = int(weight_mask.sum())
    return 2 * input_dims[0] * n_weights * int(np.prod(out))


def partition_dims(dims: Sequence[int], g_M: int, g_N: int) -> GroupPartition:
    M, N, K_h, K_w, K_d = dims
    return GroupPartition(M=M, N=N, kernel=(K_d, K_h, K_w), g_M=g_M, g_N=g_N)


def partition(dims: Sequence[int], g_M: int, g_N: int) -> GroupPartition:
    """Partitions a layer with dims (M, N, K_h, K_w, K_d) into kernel groups with `P = ceil(M / g_M)` rows and
    `Q = ceil(N / g_N)` columns.
    """
    if g_M < 1 or g_N < 1:
        raise ValueError(f'Group sizes must be >= 1, got g_M={g_M} and g_N={g_N}')
    if len(dims) != 5 or any(d < 1 for d in dims):
        raise ValueError(f'Dims must be five values >= 1 (M, N, K_h, K_w, K_d), got {tuple(dims)}')
    return partition_dims(dims, g_M, g_N)
