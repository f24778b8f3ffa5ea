"""Structured sparsity schemes (Filter, Vanilla and KGS), per-location group norms, masks and pruning-rate statistics.
"""
from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from typing import List, Optional, Sequence, Union
import warnings

import numpy as np
import torch
from torchtyping import TensorType, patch_typeguard
from typeguard import typechecked

from sparse3d.tensor_core import ConvSpec, GroupPartition, WeightTensor5D, flops_count, partition

patch_typeguard()


class SchemeKind(str, Enum):
    FILTER = 'filter'
    VANILLA = 'vanilla'
    KGS = 'kgs'


NORM_KINDS = ('l1', 'l2', 'mix')


def scheme_partition(dims: Sequence[int], scheme: Union[SchemeKind, str], g_M: int, g_N: int) -> GroupPartition:
    """The partition a scheme operates on. Filter pruning ignores `g_N` and uses one group per filter."""
    scheme = SchemeKind(scheme)
    if scheme == SchemeKind.FILTER:
        return partition(dims, 1, dims[1])
    return partition(dims, g_M, g_N)


def bits_shape(scheme: SchemeKind, partition: GroupPartition) -> tuple:
    if scheme == SchemeKind.KGS:
        return (partition.P, partition.Q) + tuple(partition.kernel)
    if scheme == SchemeKind.VANILLA:
        return (partition.P, partition.Q)
    return (partition.M,)


@dataclass(frozen=True, eq=False)
class GroupNormTensor:
    """Group norms at the granularity of a scheme: (P, Q, K_d, K_h, K_w) for KGS, (P, Q) for Vanilla, (M,) for
    Filter."""
    values: torch.Tensor
    scheme: SchemeKind
    partition: GroupPartition
    norm_kind: str = 'mix'
    alpha: float = 0.5
    layer_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'scheme', SchemeKind(self.scheme))
        expected = bits_shape(self.scheme, self.partition)
        if tuple(self.values.shape) != expected:
            raise ValueError(f'Norms of shape {tuple(self.values.shape)} do not match the {self.scheme.value} '
                             f'granularity {expected}')
        assert bool((self.values >= 0).all()), 'Group norms must be non-negative'


@dataclass(frozen=True)
class GroupMask:
    """Keep (True) / prune (False) decisions of a layer at the granularity of its scheme.

    Parameters
    ----------
    scheme : SchemeKind
        The sparsity scheme.
    partition : GroupPartition
        Kernel-group partition (for Filter masks `g_M = 1`).
    bits : torch.Tensor
        Boolean tensor of shape (P, Q, K_d, K_h, K_w) for KGS, (P, Q) for Vanilla and (M,) for Filter.
    layer_id : int, optional
        Position of the layer in its model, by default 0.
    """
    scheme: SchemeKind
    partition: GroupPartition
    bits: torch.Tensor = field(compare=False)
    layer_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'scheme', SchemeKind(self.scheme))
        expected = bits_shape(self.scheme, self.partition)
        if tuple(self.bits.shape) != expected:
            raise ValueError(f'Mask bits of shape {tuple(self.bits.shape)} do not match the {self.scheme.value} '
                             f'granularity {expected}')
        if self.scheme == SchemeKind.FILTER and self.partition.g_M != 1:
            raise ValueError(f'Filter masks require a partition with g_M=1, got g_M={self.partition.g_M}')
        object.__setattr__(self, 'bits', self.bits.to(torch.bool))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupMask):
            return NotImplemented
        return (self.scheme == other.scheme and self.partition == other.partition
                and torch.equal(self.bits, other.bits))

    @staticmethod
    def all_true(scheme: Union[SchemeKind, str], partition: GroupPartition, layer_id: int = 0) -> 'GroupMask':
        scheme = SchemeKind(scheme)
        return GroupMask(scheme, partition, torch.ones(bits_shape(scheme, partition), dtype=torch.bool), layer_id)

    @staticmethod
    def all_false(scheme: Union[SchemeKind, str], partition: GroupPartition, layer_id: int = 0) -> 'GroupMask':
        scheme = SchemeKind(scheme)
        return GroupMask(scheme, partition, torch.zeros(bits_shape(scheme, partition), dtype=torch.bool), layer_id)

    @staticmethod
    def random(scheme: Union[SchemeKind, str], partition: GroupPartition, keep_prob: float = 0.5,
               generator: Optional[torch.Generator] = None, layer_id: int = 0) -> 'GroupMask':
        scheme = SchemeKind(scheme)
        bits = torch.rand(bits_shape(scheme, partition), generator=generator) < keep_prob
        return GroupMask(scheme, partition, bits, layer_id)

    @property
    def kept_fraction(self) -> float:
        return self.bits.float().mean().item()

    @property
    def n_kept(self) -> int:
        return int(self.bits.sum())

    def is_dead(self) -> bool:
        return not bool(self.bits.any())

    def to_kgs(self) -> 'GroupMask':
        """Expresses the mask at KGS granularity (every location of a group shares the group's bit)."""
        if self.scheme == SchemeKind.KGS:
            return self
        kernel = tuple(self.partition.kernel)
        if self.scheme == SchemeKind.VANILLA:
            bits = self.bits[:, :, None, None, None].expand(*self.bits.shape, *kernel)
        else:
            bits = self.bits[:, None, None, None, None].expand(self.partition.M, 1, *kernel)
        return GroupMask(SchemeKind.KGS, self.partition, bits.contiguous(), self.layer_id)

    def weight_mask(self) -> torch.Tensor:
        """Boolean tensor of the weight shape (M, N, K_d, K_h, K_w)."""
        return expand_to_weights(self.bits.to(torch.uint8), self.scheme, self.partition).to(torch.bool).contiguous()


def expand_to_weights(values: torch.Tensor, scheme: Union[SchemeKind, str], partition: GroupPartition
                      ) -> torch.Tensor:
    """Broadcasts per-bit values (mask bits, norms or penalties) to the weight shape (M, N, K_d, K_h, K_w)."""
    scheme = SchemeKind(scheme)
    kernel = tuple(partition.kernel)
    if scheme == SchemeKind.FILTER:
        return values[:, None, None, None, None].expand(partition.M, partition.N, *kernel)
    if scheme == SchemeKind.VANILLA:
        values = values[:, :, None, None, None].expand(*values.shape, *kernel)
    expanded = values.repeat_interleave(partition.g_M, dim=0).repeat_interleave(partition.g_N, dim=1)
    return expanded[:partition.M, :partition.N]


def _check_partition(weights: WeightTensor5D, partition: GroupPartition):
    if (partition.M, partition.N, tuple(partition.kernel)) != (weights.M, weights.N, weights.kernel):
        raise ValueError(f'Partition (M={partition.M}, N={partition.N}, kernel={partition.kernel}) does not match '
                         f'weights of shape {tuple(weights.data.shape)}')


@typechecked
def grouped_view(w: TensorType["M", "N", "K_d", "K_h", "K_w"], partition: GroupPartition) -> torch.Tensor:
    """Zero-pads a weight tensor to full groups and reshapes it to (P, g_M, Q, g_N, K_d, K_h, K_w)."""
    pad_m = partition.P * partition.g_M - partition.M
    pad_n = partition.Q * partition.g_N - partition.N
    if pad_m or pad_n:
        w = torch.nn.functional.pad(w, (0, 0, 0, 0, 0, 0, 0, pad_n, 0, pad_m))
    return w.reshape(partition.P, partition.g_M, partition.Q, partition.g_N, *partition.kernel)


def group_norm_values(w: torch.Tensor, partition: GroupPartition, scheme: Union[SchemeKind, str],
                      norm_kind: str = 'mix', alpha: float = 0.5) -> torch.Tensor:
    """Raw group norms of a weight tensor (differentiable where the norm is)."""
    scheme = SchemeKind(scheme)
    if norm_kind not in NORM_KINDS:
        raise ValueError(f'Unknown norm kind {norm_kind}, expected one of {NORM_KINDS}')
    if not 0 <= alpha <= 1:
        raise ValueError(f'The norm mix alpha must lie in [0, 1], got {alpha}')

    if scheme == SchemeKind.FILTER:
        flat = w.reshape(w.shape[0], -1)
        l1, sq = flat.abs().sum(-1), flat.pow(2).sum(-1)
    else:
        grouped = grouped_view(w, partition)
        dims = (1, 3) if scheme == SchemeKind.KGS else (1, 3, 4, 5, 6)
        l1, sq = grouped.abs().sum(dims), grouped.pow(2).sum(dims)

    if norm_kind == 'l1':
        return l1
    l2 = sq.sqrt()
    if norm_kind == 'l2':
        return l2
    return alpha * l1 + (1 - alpha) * l2


def group_norm(weights: WeightTensor5D, partition: GroupPartition, scheme: Union[SchemeKind, str],
               norm_kind: str = 'mix', alpha: float = 0.5) -> GroupNormTensor:
    """Per-location (KGS), per-group (Vanilla) or per-filter norms of a layer.

    Parameters
    ----------
    weights : WeightTensor5D
        The layer weights.
    partition : GroupPartition
        Partition matching the weights (see `scheme_partition`).
    scheme : SchemeKind
        Granularity of the norms.
    norm_kind : str, optional
        One of `l1`, `l2` or `mix` (`alpha * l1 + (1 - alpha) * l2`), by default 'mix'.
    alpha : float, optional
        Share of the l1 norm in the mix, by default 0.5.

    Returns
    -------
    GroupNormTensor
        The non-negative norms.
    """
    _check_partition(weights, partition)
    with torch.no_grad():
        values = group_norm_values(weights.data, partition, scheme, norm_kind, alpha)
    return GroupNormTensor(values, SchemeKind(scheme), partition, norm_kind, alpha, weights.layer_id)


def apply_mask(weights: WeightTensor5D, mask: GroupMask) -> WeightTensor5D:
    """Zeroes every pruned weight; kept weights stay bit-identical."""
    _check_partition(weights, mask.partition)
    keep = mask.weight_mask().to(weights.data.device)
    data = torch.where(keep, weights.data, torch.zeros((), dtype=weights.data.dtype))
    return WeightTensor5D(data, weights.layer_id)


def mask_from_weights(weights: WeightTensor5D, scheme: Union[SchemeKind, str], partition: GroupPartition
                      ) -> GroupMask:
    """Recovers the mask of an already pruned tensor: a bit is kept iff any of its weights is non-zero."""
    norms = group_norm(weights, partition, scheme, 'l1')
    return GroupMask(norms.scheme, partition, norms.values > 0, weights.layer_id)


def per_location_flops(partition: GroupPartition, scheme: Union[SchemeKind, str], spec: ConvSpec,
                       input_dims: Sequence[int]) -> torch.Tensor:
    """Dense FLOPs attributable to every mask bit, ragged groups pro-rated by their actual member count."""
    scheme = SchemeKind(scheme)
    if input_dims[1] != partition.N:
        raise ValueError(f'Input has {input_dims[1]} channels but the partition expects N={partition.N}')
    out = spec.output_dims(input_dims[2:], partition.kernel)
    per_weight = 2 * input_dims[0] * int(np.prod(out))
    rows = torch.from_numpy(partition.row_sizes())
    cols = torch.from_numpy(partition.channel_sizes())
    members = rows[:, None] * cols[None, :]
    if scheme == SchemeKind.KGS:
        members = members[:, :, None, None, None].expand(*members.shape, *partition.kernel)
    elif scheme == SchemeKind.VANILLA:
        members = members * partition.K_s
    else:
        members = torch.full((partition.M,), partition.N * partition.K_s, dtype=torch.int64)
    return (members * per_weight).to(torch.int64).contiguous()


@dataclass(frozen=True)
class SparsityStats:
    param_rate: float
    flops_rate: float
    flops_after: int
    flops_dense: int
    params_kept: int
    params_dense: int
    dead_layers: List[int] = field(default_factory=list)

    def to_dict(self):
        return dict(param_rate=self.param_rate, flops_rate=self.flops_rate, flops_after=self.flops_after,
                    flops_dense=self.flops_dense, params_kept=self.params_kept, params_dense=self.params_dense,
                    dead_layers=list(self.dead_layers))


def _rate(dense: int, kept: int) -> float:
    return math.inf if kept == 0 else dense / kept


def sparsity_stats(weights_or_masks: Union[GroupMask, WeightTensor5D, Sequence[Union[GroupMask, WeightTensor5D]]],
                   specs: Union[ConvSpec, Sequence[ConvSpec]],
                   input_dims: Union[Sequence[int], Sequence[Sequence[int]]]) -> SparsityStats:
    """Model-wide parameter and FLOPs pruning rates.

    Parameters
    ----------
    weights_or_masks : Union[GroupMask, WeightTensor5D, Sequence[...]]
        Per layer either the mask or the (pruned) weights, whose non-zero positions are counted.
    specs : Union[ConvSpec, Sequence[ConvSpec]]
        Per layer stride and padding.
    input_dims : Union[Sequence[int], Sequence[Sequence[int]]]
        Per layer (batch, N, D, H, W) of its input.

    Returns
    -------
    SparsityStats
        `param_rate = dense / kept` weights and `flops_rate = dense / masked` FLOPs. If a layer is fully pruned the
        rates are infinite and a warning is issued.
    """
    if isinstance(weights_or_masks, (GroupMask, WeightTensor5D)):
        weights_or_masks, specs, input_dims = [weights_or_masks], [specs], [input_dims]
    if not (len(weights_or_masks) == len(specs) == len(input_dims)):
        raise ValueError(f'Got {len(weights_or_masks)} layers but {len(specs)} specs and {len(input_dims)} input dims')

    flops_dense = flops_kept = params_dense = params_kept = 0
    dead_layers = []
    for i, (item, spec, dims) in enumerate(zip(weights_or_masks, specs, input_dims)):
        if isinstance(item, GroupMask):
            keep = item.weight_mask()
            shape_only = WeightTensor5D(torch.empty(keep.shape, dtype=torch.float32))
        else:
            keep = item.data != 0
            shape_only = item
        flops_dense += flops_count(shape_only, spec, dims)
        flops_kept += flops_count(shape_only, spec, dims, keep)
        params_dense += keep.numel()
        kept = int(keep.sum())
        params_kept += kept
        if kept == 0:
            dead_layers.append(i)

    if dead_layers:
        warnings.warn(f'Layers {dead_layers} are fully pruned; the pruning rates are meaningless')
        logging.warning(f'Fully pruned layers {dead_layers}')
        return SparsityStats(math.inf, math.inf, flops_kept, flops_dense, params_kept, params_dense, dead_layers)
    return SparsityStats(_rate(params_dense, params_kept), _rate(flops_dense, flops_kept), flops_kept, flops_dense,
                         params_kept, params_dense)


def mask_from_threshold(norms: GroupNormTensor, threshold: float, allow_dead_layers: bool = False) -> GroupMask:
    """Keeps exactly the locations whose norm exceeds `threshold`.

    A threshold at or above the largest norm prunes every location. That raises unless `allow_dead_layers` is set,
    in which case an all-false mask is returned.

    Raises
    ------
    ValueError
        If the threshold is negative or the whole layer would be pruned (unless `allow_dead_layers`).
    """
    if threshold < 0:
        raise ValueError(f'The threshold must be non-negative, got {threshold}')
    bits = norms.values > threshold
    if not bool(bits.any()) and not allow_dead_layers:
        raise ValueError(f'Threshold {threshold} prunes all of layer {norms.layer_id} '
                         f'(max norm {norms.values.max().item()})')
    return GroupMask(norms.scheme, norms.partition, bits, norms.layer_id)


def mask_for_target_rate(norms: Union[GroupNormTensor, Sequence[GroupNormTensor]],
                         per_location_flops: Union[torch.Tensor, Sequence[torch.Tensor]],
                         target_flops_rate: float,
                         allow_dead_layers: bool = False) -> Union[GroupMask, List[GroupMask]]:
    """Greedily prunes locations in ascending norm order (model wide) until the FLOPs rate reaches the target.

    Ties are broken by the lowest (layer, p, q, d, h, w) index. The last surviving location of a layer is skipped
    unless `allow_dead_layers` is set.

    Parameters
    ----------
    norms : Union[GroupNormTensor, Sequence[GroupNormTensor]]
        Per layer group norms.
    per_location_flops : Union[torch.Tensor, Sequence[torch.Tensor]]
        Per layer dense FLOPs of every location (same shape as the norms).
    target_flops_rate : float
        Targeted `dense FLOPs / masked FLOPs` (>= 1).
    allow_dead_layers : bool, optional
        Allow to prune whole layers, by default False.

    Returns
    -------
    Union[GroupMask, List[GroupMask]]
        One mask per layer (a single mask if a single layer was passed).

    Raises
    ------
    ValueError
        If the target is below 1 or cannot be reached.
    """
    single = isinstance(norms, GroupNormTensor)
    if single:
        norms, per_location_flops = [norms], [per_location_flops]
    if target_flops_rate < 1:
        raise ValueError(f'The targeted FLOPs rate must be >= 1, got {target_flops_rate}')
    if len(norms) != len(per_location_flops):
        raise ValueError(f'Got {len(norms)} norm tensors but {len(per_location_flops)} FLOPs tensors')

    values, flops, layer_of = [], [], []
    for i, (norm, loc_flops) in enumerate(zip(norms, per_location_flops)):
        if tuple(loc_flops.shape) != tuple(norm.values.shape):
            raise ValueError(f'FLOPs of shape {tuple(loc_flops.shape)} do not match norms of shape '
                             f'{tuple(norm.values.shape)} for layer {i}')
        values.append(norm.values.detach().cpu().double().reshape(-1).numpy())
        flops.append(loc_flops.cpu().reshape(-1).numpy().astype(np.int64))
        layer_of.append(np.full(values[-1].shape, i))
    values, flops, layer_of = np.concatenate(values), np.concatenate(flops), np.concatenate(layer_of)
    offsets = np.cumsum([0] + [n.values.numel() for n in norms])

    keep = np.ones(values.shape, dtype=bool)
    alive = np.array([n.values.numel() for n in norms])
    dense = int(flops.sum())
    remaining = dense
    # The concatenation is in lexicographic (layer, p, q, d, h, w) order, so a stable sort breaks ties by index
    for idx in np.argsort(values, kind='stable'):
        if dense >= target_flops_rate * remaining:
            break
        layer = layer_of[idx]
        if alive[layer] == 1 and not allow_dead_layers:
            continue
        keep[idx] = False
        alive[layer] -= 1
        remaining -= int(flops[idx])
        if remaining == 0:
            break

    if remaining == 0 or dense < target_flops_rate * remaining:
        raise ValueError(f'The targeted FLOPs rate {target_flops_rate} is not reachable '
                         f'(best achievable {dense / max(remaining, 1):.3f} with remaining FLOPs {remaining})')

    masks = [
        GroupMask(norm.scheme, norm.partition,
                  torch.from_numpy(keep[offsets[i]:offsets[i + 1]].copy()).reshape(norm.values.shape),
                  norm.layer_id)
        for i, norm in enumerate(norms)
    ]
    return masks[0] if single else masks
