"""Offline compilation of pruned layers: hierarchical weight reorder (HWR), the compact weight storage (CWS) and
execution schedules.

CWS layout (little-endian)
--------------------------
    header   `<4sHcBHHBBBHHI3H3HB`: magic `S3DC`, version, endianness `L`, scheme (1 Vanilla, 2 KGS), M, N, K_h, K_w,
             K_d, g_M, g_N, kept-location count, stride (d h w), padding (d h w), has-bias flag
    reorder  uint16[M]   reordered position of every original filter
    offsets  uint32[P]   start of every stored filter-group row in the index array (CSR style)
    index    uint8[n, 4] kept locations as [K_d, K_h, K_w, channel group] (Vanilla: [0, 0, 0, channel group])
    weights  float32     per location the (m, n) block of the row's filters and the group's channels
                         (Vanilla: the (m, n, k_d, k_h, k_w) block of the whole group)
    bias     float32[M]  only if the flag is set

Filter-group rows keep the order of their filters; the rows themselves are permuted. Within a row the kept locations
are sorted by (d, h, w, q) so rows that share a location read the same input at the same step.
"""
from dataclasses import dataclass, field
from functools import cached_property
import logging
import struct
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import torch

from sparse3d.helper.formats import FormatError
from sparse3d.sparsity import GroupMask, SchemeKind
from sparse3d.tensor_core import ConvSpec, GroupPartition, WeightTensor5D, partition

CWS_MAGIC = b'S3DC'
CWS_VERSION = 1
CWS_HEADER = struct.Struct('<4sHcBHHBBBHHI3H3HB')
CWS_SCHEMES = {SchemeKind.VANILLA: 1, SchemeKind.KGS: 2}
CWS_MODEL_MAGIC = b'S3DF'
BYTE_LIMIT = 255
FILTER_LIMIT = 65535
UNROLL_FACTORS = (1, 2, 4, 8)
PERMUTATIONS = ('tile_location', 'location_tile')
OPT_LEVELS = ('no_opt', 'reorder', 'schedule', 'tuned')


@dataclass(frozen=True)
class Schedule:
    """Executor configuration: output tile sizes, unroll factor over the filters of a row, loop order and threads.

    `tile_location` iterates the kept locations inside the output pixel loops, `location_tile` the other way round.
    """
    tile_d: int = 1
    tile_h: int = 1
    tile_w: int = 1
    unroll: int = 1
    permutation: str = 'tile_location'
    threads: int = 1

    @property
    def tiles(self) -> Tuple[int, int, int]:
        return (self.tile_d, self.tile_h, self.tile_w)

    def check(self, output_dims: Sequence[int], g_M: int):
        """Raises a ValueError if the schedule is illegal for the output extents and group size."""
        for name, tile, extent in zip(('tile_d', 'tile_h', 'tile_w'), self.tiles, output_dims):
            if not 1 <= tile <= extent:
                raise ValueError(f'{name}={tile} must lie in [1, {extent}]')
        if self.unroll not in UNROLL_FACTORS:
            raise ValueError(f'unroll={self.unroll} must be one of {UNROLL_FACTORS}')
        if self.unroll > max(g_M, 1):
            raise ValueError(f'unroll={self.unroll} exceeds the filters per group g_M={g_M}')
        if self.permutation not in PERMUTATIONS:
            raise ValueError(f'Unknown loop permutation {self.permutation}, expected one of {PERMUTATIONS}')
        if self.threads < 1:
            raise ValueError(f'threads={self.threads} must be >= 1')

    def is_legal(self, output_dims: Sequence[int], g_M: int) -> bool:
        try:
            self.check(output_dims, g_M)
        except ValueError:
            return False
        return True

    def to_dict(self) -> dict:
        return dict(tile_d=self.tile_d, tile_h=self.tile_h, tile_w=self.tile_w, unroll=self.unroll,
                    permutation=self.permutation, threads=self.threads)

    @staticmethod
    def untiled(output_dims: Sequence[int], threads: int = 1) -> 'Schedule':
        return Schedule(*output_dims, unroll=1, permutation='tile_location', threads=threads)


@dataclass(frozen=True, eq=False)
class ReorderPlan:
    """Filter permutation of HWR plus the kept locations of every stored row.

    Parameters
    ----------
    filter_perm : np.ndarray
        [M] reordered position of every original filter (the reorder array).
    row_order : np.ndarray
        [P] original filter-group rows in storage order.
    """
    filter_perm: np.ndarray
    row_order: np.ndarray

    def __post_init__(self):
        M = self.filter_perm.shape[0]
        assert np.array_equal(np.sort(self.filter_perm), np.arange(M)), 'The filter permutation must be a bijection'

    def inverse(self) -> np.ndarray:
        """[M] original filter at every reordered position."""
        return np.argsort(self.filter_perm, kind='stable')

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.filter_perm, np.arange(self.filter_perm.shape[0])))

    @staticmethod
    def identity(part: GroupPartition) -> 'ReorderPlan':
        return ReorderPlan(np.arange(part.M, dtype=np.int64), np.arange(part.P, dtype=np.int64))

    @staticmethod
    def from_row_order(part: GroupPartition, row_order: Sequence[int]) -> 'ReorderPlan':
        row_order = np.asarray(row_order, dtype=np.int64)
        sizes = part.row_sizes()
        filter_perm = np.empty(part.M, dtype=np.int64)
        position = 0
        for p in row_order:
            lo, hi = part.filter_range(int(p))
            filter_perm[lo:hi] = np.arange(position, position + sizes[p])
            position += sizes[p]
        return ReorderPlan(filter_perm, row_order)


@dataclass(eq=False)
class CompactWeightStore:
    """One layer in compact weight storage (see the module docstring for the byte layout)."""
    scheme: SchemeKind
    M: int
    N: int
    kernel: Tuple[int, int, int]
    g_M: int
    g_N: int
    reorder: np.ndarray
    offsets: np.ndarray
    index: np.ndarray
    weights: np.ndarray
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (0, 0, 0)
    bias: Optional[np.ndarray] = None
    layer_id: int = field(default=0, compare=False)

    @property
    def partition(self) -> GroupPartition:
        return GroupPartition(self.M, self.N, tuple(self.kernel), self.g_M, self.g_N)

    @property
    def dims(self) -> Tuple[int, int, int, int, int]:
        K_d, K_h, K_w = self.kernel
        return (self.M, self.N, K_h, K_w, K_d)

    @property
    def n_locations(self) -> int:
        return int(self.index.shape[0])

    @property
    def spec(self) -> ConvSpec:
        bias = None if self.bias is None else torch.from_numpy(self.bias.astype(np.float32))
        return ConvSpec(tuple(self.stride), tuple(self.padding), bias)

    @cached_property
    def row_order(self) -> np.ndarray:
        """Original filter-group rows in storage order."""
        part = self.partition
        return np.argsort(self.reorder.astype(np.int64)[np.arange(part.P) * part.g_M], kind='stable')

    @cached_property
    def location_bounds(self) -> np.ndarray:
        """[P + 1] start of every stored row in the index array, closed by the location count."""
        return np.append(self.offsets.astype(np.int64), self.n_locations)

    @cached_property
    def location_sizes(self) -> np.ndarray:
        """[n_locations] number of weights stored for every index entry (ragged groups pro-rated)."""
        part = self.partition
        rows = part.row_sizes()[self.row_order]
        row_of_location = np.repeat(np.arange(part.P), np.diff(self.location_bounds))
        members = rows[row_of_location] * part.channel_sizes()[self.index[:, 3].astype(np.int64)]
        return members * part.K_s if self.scheme == SchemeKind.VANILLA else members

    @cached_property
    def weight_starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.location_sizes)[:-1])).astype(np.int64)

    def plan(self) -> ReorderPlan:
        return ReorderPlan(self.reorder.astype(np.int64), self.row_order.astype(np.int64))

    def payload_nbytes(self) -> int:
        """Bytes of the reorder, offset, index and weight arrays (header and bias excluded)."""
        return 2 * self.M + 4 * self.offsets.size + self.index.size + 4 * self.weights.size

    def nbytes(self) -> int:
        return CWS_HEADER.size + self.payload_nbytes() + (0 if self.bias is None else 4 * self.M)

    def to_bytes(self) -> bytes:
        K_d, K_h, K_w = self.kernel
        header = CWS_HEADER.pack(CWS_MAGIC, CWS_VERSION, b'L', CWS_SCHEMES[self.scheme], self.M, self.N, K_h, K_w,
                                 K_d, self.g_M, self.g_N, self.n_locations, *self.stride, *self.padding,
                                 int(self.bias is not None))
        parts = [header, self.reorder.astype('<u2').tobytes(), self.offsets.astype('<u4').tobytes(),
                 self.index.astype(np.uint8).tobytes(), self.weights.astype('<f4').tobytes()]
        if self.bias is not None:
            parts.append(self.bias.astype('<f4').tobytes())
        return b''.join(parts)

    @staticmethod
    def from_bytes(buffer: bytes, start: int = 0) -> Tuple['CompactWeightStore', int]:
        """Parses one layer starting at `start`.

        Returns
        -------
        Tuple[CompactWeightStore, int]
            The store and the offset right behind it.

        Raises
        ------
        FormatError
            With the byte offset of the first inconsistency.
        """
        return _parse_cws(buffer, start)


def _parse_cws(buffer: bytes, start: int) -> Tuple[CompactWeightStore, int]:
    if len(buffer) - start < CWS_HEADER.size:
        raise FormatError(f'Truncated CWS header ({len(buffer) - start} of {CWS_HEADER.size} bytes)', len(buffer))
    (magic, version, endian, scheme_code, M, N, K_h, K_w, K_d, g_M, g_N, n_loc, s_d, s_h, s_w, p_d, p_h, p_w,
     has_bias) = CWS_HEADER.unpack_from(buffer, start)
    if magic != CWS_MAGIC:
        raise FormatError(f'Bad CWS magic {magic!r}', start)
    if version != CWS_VERSION:
        raise FormatError(f'Unsupported CWS version {version}', start + 4)
    if endian != b'L':
        raise FormatError(f'Unsupported endianness {endian!r}', start + 6)
    schemes = {code: scheme for scheme, code in CWS_SCHEMES.items()}
    if scheme_code not in schemes:
        raise FormatError(f'Unknown CWS scheme code {scheme_code}', start + 7)
    if min(M, N, K_h, K_w, K_d, g_M, g_N, s_d, s_h, s_w) < 1 or has_bias > 1:
        raise FormatError('Invalid dims in CWS header', start + 8)
    scheme = schemes[scheme_code]
    part = partition((M, N, K_h, K_w, K_d), g_M, g_N)
    position = start + CWS_HEADER.size

    def read(dtype: str, count: int, what: str) -> np.ndarray:
        nonlocal position
        size = np.dtype(dtype).itemsize * count
        if position + size > len(buffer):
            raise FormatError(f'Truncated {what} array ({len(buffer) - position} of {size} bytes)', len(buffer))
        values = np.frombuffer(buffer, dtype=dtype, count=count, offset=position).copy()
        position += size
        return values

    reorder_at = position
    reorder = read('<u2', M, 'reorder').astype(np.int64)
    seen = np.zeros(M, dtype=bool)
    for i, value in enumerate(reorder):
        if value >= M or seen[value]:
            raise FormatError(f'Reorder array is not a permutation (entry {i} = {value})', reorder_at + 2 * i)
        seen[value] = True

    offsets_at = position
    offsets = read('<u4', part.P, 'offset').astype(np.int64)
    bounds = np.append(offsets, n_loc)
    for i in range(part.P):
        if bounds[i] > bounds[i + 1] or (i == 0 and bounds[0] != 0):
            raise FormatError(f'Offsets are not non-decreasing within [0, {n_loc}] (entry {i} = {bounds[i]})',
                              offsets_at + 4 * i)

    index_at = position
    index = read('u1', 4 * n_loc, 'index').reshape(n_loc, 4)
    limits = np.array([K_d, K_h, K_w, part.Q]) if scheme == SchemeKind.KGS else np.array([1, 1, 1, part.Q])
    bad = np.argwhere(index >= limits[None, :])
    if bad.size:
        row, col = bad[0]
        raise FormatError(f'Index byte {index[row, col]} of entry {row} exceeds its bound {limits[col]}',
                          index_at + 4 * int(row) + int(col))
    keys = ((index[:, 0].astype(np.int64) * K_h + index[:, 1]) * K_w + index[:, 2]) * part.Q + index[:, 3]
    for i in range(part.P):
        row_keys = keys[bounds[i]:bounds[i + 1]]
        decreasing = np.nonzero(np.diff(row_keys) <= 0)[0]
        if decreasing.size:
            entry = bounds[i] + decreasing[0] + 1
            raise FormatError(f'Locations of stored row {i} are not strictly increasing', index_at + 4 * int(entry))

    store = CompactWeightStore(scheme, M, N, (K_d, K_h, K_w), g_M, g_N, reorder, offsets, index,
                               np.zeros(0, dtype=np.float32), (s_d, s_h, s_w), (p_d, p_h, p_w))
    n_weights = int(store.location_sizes.sum())
    store.weights = read('<f4', n_weights, 'weight').astype(np.float32)
    if has_bias:
        store.bias = read('<f4', M, 'bias').astype(np.float32)
    return store, position


def _grouped_np(w: np.ndarray, part: GroupPartition) -> np.ndarray:
    padded = np.pad(w, ((0, part.P * part.g_M - part.M), (0, part.Q * part.g_N - part.N), (0, 0), (0, 0), (0, 0)))
    return padded.reshape(part.P, part.g_M, part.Q, part.g_N, *part.kernel)


def _kgs_bits_np(mask: GroupMask) -> np.ndarray:
    """[P, K_d, K_h, K_w, Q] kept locations of every row, i.e. in (d, h, w, q) order."""
    return mask.to_kgs().bits.cpu().numpy().transpose(0, 2, 3, 4, 1)


def _member_mask(part: GroupPartition, p: int, qs: np.ndarray) -> np.ndarray:
    """[len(qs), g_M, g_N] which slots of the padded groups hold real weights."""
    rows = np.arange(part.g_M) < part.row_sizes()[p]
    cols = (qs[:, None] * part.g_N + np.arange(part.g_N)[None, :]) < part.N
    return rows[None, :, None] & cols[:, None, :]


def filter_similarity(f_a: Union[np.ndarray, torch.Tensor, set], f_b: Union[np.ndarray, torch.Tensor, set]) -> int:
    """Number of kept locations two filters (or filter-group rows) share."""
    if isinstance(f_a, (set, frozenset)):
        return len(f_a & set(f_b))
    a = np.asarray(f_a.cpu() if isinstance(f_a, torch.Tensor) else f_a, dtype=bool)
    b = np.asarray(f_b.cpu() if isinstance(f_b, torch.Tensor) else f_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f'Filter patterns of shapes {a.shape} and {b.shape} are not comparable')
    return int(np.logical_and(a, b).sum())


def _row_patterns(mask: GroupMask) -> np.ndarray:
    return _kgs_bits_np(mask).reshape(mask.partition.P, -1).astype(np.int64)


def adjacent_similarity(mask: GroupMask, order: Optional[Sequence[int]] = None) -> np.ndarray:
    """Similarities of consecutive filter-group rows in the given order (identity by default)."""
    patterns = _row_patterns(mask)
    order = np.arange(patterns.shape[0]) if order is None else np.asarray(order)
    return np.array([int(patterns[a] @ patterns[b]) for a, b in zip(order[:-1], order[1:])], dtype=np.int64)


def _greedy_pairing(patterns: np.ndarray) -> List[int]:
    similarity = patterns @ patterns.T
    kept = patterns.sum(1)
    unplaced = list(range(patterns.shape[0]))
    order = []
    while unplaced:
        seed = max(unplaced, key=lambda r: (kept[r], -r))
        unplaced.remove(seed)
        order.append(seed)
        if unplaced:
            partner = max(unplaced, key=lambda r: (similarity[seed, r], -r))
            unplaced.remove(partner)
            order.append(partner)
    return order


def hwr_reorder(weights: WeightTensor5D, mask: GroupMask) -> Tuple[ReorderPlan, WeightTensor5D, np.ndarray]:
    """Hierarchical weight reorder of a layer.

    The filter-group rows are paired greedily: the unplaced row with the most kept locations is followed by its most
    similar unplaced row (ties go to the lower index). If this does not increase the adjacent similarity over the
    identity order the identity is kept. Within each row the kept locations follow the canonical (d, h, w, q) order.

    Parameters
    ----------
    weights : WeightTensor5D
        The layer weights.
    mask : GroupMask
        KGS, Vanilla or Filter mask of the layer.

    Returns
    -------
    Tuple[ReorderPlan, WeightTensor5D, np.ndarray]
        The plan, the weights with permuted filters and the [P, Q, K_d, K_h, K_w] row patterns in storage order.
    """
    kgs = mask.to_kgs()
    part = kgs.partition
    patterns = _row_patterns(kgs)
    order = _greedy_pairing(patterns)
    before = int(adjacent_similarity(kgs).sum())
    after = int(adjacent_similarity(kgs, order).sum())
    if after < before:
        order = list(range(part.P))
        after = before
    logging.debug(f'HWR of layer {weights.layer_id}: adjacent similarity {before} -> {after}')

    plan = ReorderPlan.from_row_order(part, order)
    permuted = WeightTensor5D(weights.data[torch.from_numpy(plan.inverse())], weights.layer_id)
    return plan, permuted, kgs.bits.cpu().numpy()[np.asarray(order)]


def check_byte_limits(part: GroupPartition):
    K_d, K_h, K_w = part.kernel
    for name, value in (('K_d', K_d), ('K_h', K_h), ('K_w', K_w), ('ceil(N / g_N)', part.Q)):
        if value > BYTE_LIMIT:
            raise ValueError(f'{name}={value} exceeds the one-byte index limit of {BYTE_LIMIT}')
    for name, value in (('M', part.M), ('N', part.N), ('g_M', part.g_M), ('g_N', part.g_N)):
        if value > FILTER_LIMIT:
            raise ValueError(f'{name}={value} exceeds the 16-bit limit of {FILTER_LIMIT}')


def cws_encode(weights: WeightTensor5D, mask: GroupMask, plan: Optional[ReorderPlan] = None,
               spec: Optional[ConvSpec] = None) -> CompactWeightStore:
    """Encodes the masked layer in compact weight storage.

    Parameters
    ----------
    weights : WeightTensor5D
        The layer weights (stored as float32).
    mask : GroupMask
        KGS or Vanilla mask (Filter masks are stored as KGS masks of their `g_M = 1` partition).
    plan : ReorderPlan, optional
        Row order of `hwr_reorder`, by default the identity.
    spec : ConvSpec, optional
        Stride, padding and bias stored alongside, by default stride 1 without padding and bias.

    Returns
    -------
    CompactWeightStore
        The deterministic encoding.

    Raises
    ------
    ValueError
        If a dimension exceeds its byte width or the mask does not match the weights.
    """
    if mask.scheme == SchemeKind.FILTER:
        mask = mask.to_kgs()
    part = mask.partition
    if (part.M, part.N, tuple(part.kernel)) != (weights.M, weights.N, weights.kernel):
        raise ValueError(f'Mask partition (M={part.M}, N={part.N}, kernel={part.kernel}) does not match weights of '
                         f'shape {tuple(weights.data.shape)}')
    check_byte_limits(part)
    spec = spec if spec is not None else ConvSpec()
    plan = plan if plan is not None else ReorderPlan.identity(part)

    grouped = _grouped_np(weights.as_numpy(np.float32), part)
    offsets, index, values = [], [], []
    count = 0
    if mask.scheme == SchemeKind.KGS:
        kept = _kgs_bits_np(mask)
        for p in plan.row_order:
            locations = np.argwhere(kept[p])
            offsets.append(count)
            count += len(locations)
            if not len(locations):
                continue
            d, h, w, q = locations.T
            blocks = grouped[p][:, q, :, d, h, w]
            index.append(locations)
            values.append(blocks[_member_mask(part, p, q)])
    else:
        kept = mask.bits.cpu().numpy()
        for p in plan.row_order:
            q = np.nonzero(kept[p])[0]
            offsets.append(count)
            count += len(q)
            if not len(q):
                continue
            index.append(np.stack([np.zeros_like(q)] * 3 + [q], axis=1))
            blocks = grouped[p][:, q].transpose(1, 0, 2, 3, 4, 5)
            members = np.broadcast_to(_member_mask(part, p, q)[..., None, None, None], blocks.shape)
            values.append(blocks[members])

    bias = None if spec.bias is None else spec.bias_numpy(part.M, np.float32)
    return CompactWeightStore(
        scheme=mask.scheme, M=part.M, N=part.N, kernel=tuple(part.kernel), g_M=part.g_M, g_N=part.g_N,
        reorder=plan.filter_perm.astype(np.uint16),
        offsets=np.asarray(offsets, dtype=np.uint32),
        index=np.concatenate(index).astype(np.uint8) if index else np.zeros((0, 4), dtype=np.uint8),
        weights=np.concatenate(values).astype(np.float32) if values else np.zeros(0, dtype=np.float32),
        stride=tuple(spec.stride), padding=tuple(spec.padding), bias=bias, layer_id=weights.layer_id,
    )


def cws_decode(store: CompactWeightStore) -> Tuple[WeightTensor5D, GroupMask, ReorderPlan]:
    """Reconstructs the masked float32 weights (original filter order), the mask and the plan of a store."""
    part = store.partition
    grouped = np.zeros((part.P, part.g_M, part.Q, part.g_N) + tuple(part.kernel), dtype=np.float32)
    if store.scheme == SchemeKind.KGS:
        bits = np.zeros((part.P, part.Q) + tuple(part.kernel), dtype=bool)
    else:
        bits = np.zeros((part.P, part.Q), dtype=bool)
    bounds, starts = store.location_bounds, store.weight_starts
    for s, p in enumerate(store.row_order):
        lo, hi = bounds[s], bounds[s + 1]
        if lo == hi:
            continue
        locations = store.index[lo:hi].astype(np.int64)
        d, h, w, q = locations.T
        values = store.weights[starts[lo]:starts[hi - 1] + store.location_sizes[hi - 1]]
        members = _member_mask(part, p, q)
        if store.scheme == SchemeKind.KGS:
            blocks = np.zeros((len(q), part.g_M, part.g_N), dtype=np.float32)
            blocks[members] = values
            grouped[p][:, q, :, d, h, w] = blocks
            bits[p, q, d, h, w] = True
        else:
            shape = (len(q), part.g_M, part.g_N) + tuple(part.kernel)
            blocks = np.zeros(shape, dtype=np.float32)
            blocks[np.broadcast_to(members[..., None, None, None], shape)] = values
            grouped[p][:, q] = blocks.transpose(1, 0, 2, 3, 4, 5)
            bits[p, q] = True
    dense = grouped.reshape(part.P * part.g_M, part.Q * part.g_N, *part.kernel)[:part.M, :part.N]
    weights = WeightTensor5D(torch.from_numpy(np.ascontiguousarray(dense)), store.layer_id)
    mask = GroupMask(store.scheme, part, torch.from_numpy(bits), store.layer_id)
    return weights, mask, store.plan()


@dataclass(eq=False)
class CsrLayer:
    """A masked layer as a traditional CSR matrix [M, N * K_s] with one 4-byte column index per weight."""
    matrix: sp.csr_matrix
    N: int
    kernel: Tuple[int, int, int]
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (0, 0, 0)
    bias: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    @property
    def spec(self) -> ConvSpec:
        bias = None if self.bias is None else torch.from_numpy(self.bias.astype(np.float32))
        return ConvSpec(tuple(self.stride), tuple(self.padding), bias)

    def payload_nbytes(self) -> int:
        return self.matrix.data.nbytes + self.matrix.indices.nbytes + self.matrix.indptr.nbytes


def csr_encode(weights: WeightTensor5D, mask: Optional[GroupMask] = None, spec: Optional[ConvSpec] = None
               ) -> CsrLayer:
    data = weights.as_numpy(np.float32)
    if mask is not None:
        data = np.where(mask.weight_mask().cpu().numpy(), data, np.float32(0))
    matrix = sp.csr_matrix(data.reshape(weights.M, -1), dtype=np.float32)
    matrix.indices = matrix.indices.astype(np.int32)
    matrix.indptr = matrix.indptr.astype(np.int32)
    spec = spec if spec is not None else ConvSpec()
    bias = None if spec.bias is None else spec.bias_numpy(weights.M, np.float32)
    return CsrLayer(matrix, weights.N, weights.kernel, tuple(spec.stride), tuple(spec.padding), bias)


def csr_nbytes(weights: WeightTensor5D, mask: Optional[GroupMask] = None) -> int:
    """Bytes of float32 values, int32 column indices and int32 row pointers of the masked layer."""
    return csr_encode(weights, mask).payload_nbytes()


def default_schedule(store: Union[CompactWeightStore, GroupPartition], output_dims: Sequence[int],
                     threads: int = 1) -> Schedule:
    """A legal starting point: short depth/height tiles over full-ish rows and the largest unroll dividing g_M."""
    g_M = store.g_M
    tile_d = min(output_dims[0], 2)
    tile_h = min(output_dims[1], 4)
    tile_w = min(output_dims[2], 16)
    unroll = max(u for u in UNROLL_FACTORS if u <= g_M and g_M % u == 0)
    schedule = Schedule(tile_d, tile_h, tile_w, unroll, 'tile_location', threads)
    schedule.check(output_dims, g_M)
    return schedule


def save_cws_model(path: str, stores: Sequence[CompactWeightStore]):
    """Multi-layer `.cws` file: magic `S3DF`, uint16 version, uint16 layer count, then per layer the uint32 byte length
    followed by the layer."""
    with open(path, 'wb') as f:
        f.write(CWS_MODEL_MAGIC + struct.pack('<HH', CWS_VERSION, len(stores)))
        for store in stores:
            layer = store.to_bytes()
            f.write(struct.pack('<I', len(layer)) + layer)
    logging.info(f'Saved {len(stores)} compiled layers to {path}')


def load_cws_model(path: str) -> List[CompactWeightStore]:
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != CWS_MODEL_MAGIC:
        raise FormatError(f'Bad compiled model magic {raw[:4]!r}', 0)
    if len(raw) < 8:
        raise FormatError('Truncated compiled model header', len(raw))
    version, n_layers = struct.unpack_from('<HH', raw, 4)
    if version != CWS_VERSION:
        raise FormatError(f'Unsupported compiled model version {version}', 4)
    stores, position = [], 8
    for i in range(n_layers):
        if position + 4 > len(raw):
            raise FormatError(f'Truncated length of layer {i}', len(raw))
        (length,) = struct.unpack_from('<I', raw, position)
        store, end = CompactWeightStore.from_bytes(raw[:position + 4 + length], position + 4)
        if end != position + 4 + length:
            raise FormatError(f'Layer {i} has {position + 4 + length - end} trailing bytes', end)
        store.layer_id = i
        stores.append(store)
        position = end
    if position != len(raw):
        raise FormatError(f'{len(raw) - position} trailing bytes in compiled model', position)
    return stores
