"""Sparse 3D convolution over compact weight storage, the CSR baseline, operation counting and benchmarking.

Work is split into items (batch element, stored filter-group row, output tile). Every output element belongs to exactly
one item, so the items run in parallel without any cross-thread accumulation.
"""
from dataclasses import dataclass
import logging
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numba
from numba import prange
import numpy as np
import torch

from sparse3d.compiler import CompactWeightStore, CsrLayer, Schedule
from sparse3d.sparsity import SchemeKind
from sparse3d.tensor_core import ConvSpec, FeatureMap, conv_output_dims, pad_input

PRECISIONS = {'float32': np.float32, 'float64': np.float64}
BENCH_WARMUP = 3


@dataclass
class ExecStats:
    """Counters of one execution; they are `None` unless the execution was instrumented."""
    multiply_accumulates: Optional[int] = None
    weight_bytes_read: Optional[int] = None
    input_elements_read: Optional[int] = None
    output_elements_written: Optional[int] = None
    wall_time: float = 0.

    def to_dict(self) -> Dict[str, Any]:
        return dict(multiply_accumulates=self.multiply_accumulates, weight_bytes_read=self.weight_bytes_read,
                    input_elements_read=self.input_elements_read,
                    output_elements_written=self.output_elements_written, wall_time=self.wall_time)


@dataclass
class BenchResult:
    times: List[float]
    warmup: int
    multiply_accumulates: int
    threads: int = 1

    @property
    def repeats(self) -> int:
        return len(self.times)

    @property
    def mean(self) -> float:
        return float(np.mean(self.times))

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def min(self) -> float:
        return float(np.min(self.times))

    def to_dict(self) -> Dict[str, Any]:
        return dict(times=list(self.times), mean=self.mean, median=self.median, min=self.min, repeats=self.repeats,
                    warmup=self.warmup, multiply_accumulates=self.multiply_accumulates, threads=self.threads)


@dataclass(frozen=True, eq=False)
class _KernelArrays:
    row_filters: np.ndarray
    row_sizes: np.ndarray
    loc_bounds: np.ndarray
    loc_idx: np.ndarray
    w_start: np.ndarray
    ch_start: np.ndarray
    ch_size: np.ndarray


def _kernel_arrays(store: CompactWeightStore) -> _KernelArrays:
    part = store.partition
    sizes = part.row_sizes()[store.row_order]
    row_filters = np.full((part.P, part.g_M), -1, dtype=np.int64)
    for s, p in enumerate(store.row_order):
        lo, hi = part.filter_range(int(p))
        row_filters[s, :hi - lo] = np.arange(lo, hi)
    channel_starts = np.array([part.channel_range(q)[0] for q in range(part.Q)], dtype=np.int64)
    return _KernelArrays(row_filters, sizes.astype(np.int64), store.location_bounds.astype(np.int64),
                         np.ascontiguousarray(store.index.astype(np.int64)), store.weight_starts.astype(np.int64),
                         channel_starts, part.channel_sizes().astype(np.int64))


@numba.njit(inline='always')
def _add_bias(out, b, f, d0, d1, h0, h1, w0, w1, value):
    for od in range(d0, d1):
        for oh in range(h0, h1):
            for ow in range(w0, w1):
                out[b, f, od, oh, ow] += value


@numba.njit(inline='always')
def _tile_bounds(t, n_th, n_tw, tiles, out_dims):
    td = t // (n_th * n_tw)
    th = (t // n_tw) % n_th
    tw = t % n_tw
    d0 = td * tiles[0]
    h0 = th * tiles[1]
    w0 = tw * tiles[2]
    return (d0, min(d0 + tiles[0], out_dims[0]), h0, min(h0 + tiles[1], out_dims[1]),
            w0, min(w0 + tiles[2], out_dims[2]))


@numba.njit(parallel=True, cache=True)
def _kgs_kernel(x, weights, row_filters, row_sizes, loc_bounds, loc_idx, w_start, ch_start, ch_size, bias, stride,
                out_dims, tiles, unroll, location_outer, out):
    B = x.shape[0]
    S = row_sizes.shape[0]
    n_td = (out_dims[0] + tiles[0] - 1) // tiles[0]
    n_th = (out_dims[1] + tiles[1] - 1) // tiles[1]
    n_tw = (out_dims[2] + tiles[2] - 1) // tiles[2]
    n_tiles = n_td * n_th * n_tw
    s_d, s_h, s_w = stride
    for item in prange(B * S * n_tiles):
        b = item // (S * n_tiles)
        s = (item // n_tiles) % S
        d0, d1, h0, h1, w0, w1 = _tile_bounds(item % n_tiles, n_th, n_tw, tiles, out_dims)
        m_s = row_sizes[s]
        lo = loc_bounds[s]
        hi = loc_bounds[s + 1]
        acc = np.empty(unroll, dtype=out.dtype)
        for u0 in range(0, m_s, unroll):
            n_u = min(unroll, m_s - u0)
            if location_outer:
                for loc in range(lo, hi):
                    kd = loc_idx[loc, 0]
                    kh = loc_idx[loc, 1]
                    kw = loc_idx[loc, 2]
                    q = loc_idx[loc, 3]
                    n_q = ch_size[q]
                    ws = w_start[loc]
                    for n in range(n_q):
                        c = ch_start[q] + n
                        for od in range(d0, d1):
                            for oh in range(h0, h1):
                                for ow in range(w0, w1):
                                    xv = x[b, c, od * s_d + kd, oh * s_h + kh, ow * s_w + kw]
                                    for u in range(n_u):
                                        out[b, row_filters[s, u0 + u], od, oh, ow] += \
                                            weights[ws + (u0 + u) * n_q + n] * xv
            else:
                for od in range(d0, d1):
                    for oh in range(h0, h1):
                        for ow in range(w0, w1):
                            for u in range(n_u):
                                acc[u] = 0.
                            for loc in range(lo, hi):
                                q = loc_idx[loc, 3]
                                n_q = ch_size[q]
                                ws = w_start[loc]
                                pd = od * s_d + loc_idx[loc, 0]
                                ph = oh * s_h + loc_idx[loc, 1]
                                pw = ow * s_w + loc_idx[loc, 2]
                                for n in range(n_q):
                                    xv = x[b, ch_start[q] + n, pd, ph, pw]
                                    for u in range(n_u):
                                        acc[u] += weights[ws + (u0 + u) * n_q + n] * xv
                            for u in range(n_u):
                                out[b, row_filters[s, u0 + u], od, oh, ow] = acc[u]
        for u in range(m_s):
            f = row_filters[s, u]
            _add_bias(out, b, f, d0, d1, h0, h1, w0, w1, bias[f])
    return out


@numba.njit(parallel=True, cache=True)
def _vanilla_kernel(x, weights, row_filters, row_sizes, loc_bounds, loc_idx, w_start, ch_start, ch_size, bias,
                    kernel, stride, out_dims, tiles, unroll, location_outer, out):
    # Kernel positions are the outer reduction so the summation order equals the one of the KGS expansion
    B = x.shape[0]
    S = row_sizes.shape[0]
    K_d, K_h, K_w = kernel
    K_s = K_d * K_h * K_w
    n_td = (out_dims[0] + tiles[0] - 1) // tiles[0]
    n_th = (out_dims[1] + tiles[1] - 1) // tiles[1]
    n_tw = (out_dims[2] + tiles[2] - 1) // tiles[2]
    n_tiles = n_td * n_th * n_tw
    s_d, s_h, s_w = stride
    for item in prange(B * S * n_tiles):
        b = item // (S * n_tiles)
        s = (item // n_tiles) % S
        d0, d1, h0, h1, w0, w1 = _tile_bounds(item % n_tiles, n_th, n_tw, tiles, out_dims)
        m_s = row_sizes[s]
        lo = loc_bounds[s]
        hi = loc_bounds[s + 1]
        acc = np.empty(unroll, dtype=out.dtype)
        for u0 in range(0, m_s, unroll):
            n_u = min(unroll, m_s - u0)
            if location_outer:
                for k in range(K_s):
                    kd = k // (K_h * K_w)
                    kh = (k // K_w) % K_h
                    kw = k % K_w
                    for loc in range(lo, hi):
                        q = loc_idx[loc, 3]
                        n_q = ch_size[q]
                        ws = w_start[loc]
                        for n in range(n_q):
                            c = ch_start[q] + n
                            for od in range(d0, d1):
                                for oh in range(h0, h1):
                                    for ow in range(w0, w1):
                                        xv = x[b, c, od * s_d + kd, oh * s_h + kh, ow * s_w + kw]
                                        for u in range(n_u):
                                            out[b, row_filters[s, u0 + u], od, oh, ow] += \
                                                weights[ws + ((u0 + u) * n_q + n) * K_s + k] * xv
            else:
                for od in range(d0, d1):
                    for oh in range(h0, h1):
                        for ow in range(w0, w1):
                            for u in range(n_u):
                                acc[u] = 0.
                            for k in range(K_s):
                                pd = od * s_d + k // (K_h * K_w)
                                ph = oh * s_h + (k // K_w) % K_h
                                pw = ow * s_w + k % K_w
                                for loc in range(lo, hi):
                                    q = loc_idx[loc, 3]
                                    n_q = ch_size[q]
                                    ws = w_start[loc]
                                    for n in range(n_q):
                                        xv = x[b, ch_start[q] + n, pd, ph, pw]
                                        for u in range(n_u):
                                            acc[u] += weights[ws + ((u0 + u) * n_q + n) * K_s + k] * xv
                            for u in range(n_u):
                                out[b, row_filters[s, u0 + u], od, oh, ow] = acc[u]
        for u in range(m_s):
            f = row_filters[s, u]
            _add_bias(out, b, f, d0, d1, h0, h1, w0, w1, bias[f])
    return out


@numba.njit(cache=True)
def _count_kernel(batch, padded_dims, row_sizes, loc_bounds, loc_idx, ch_size, kernel, vanilla, stride, out_dims,
                  tiles, location_outer, itemsize):
    S = row_sizes.shape[0]
    Q = ch_size.shape[0]
    K_d, K_h, K_w = kernel
    n_td = (out_dims[0] + tiles[0] - 1) // tiles[0]
    n_th = (out_dims[1] + tiles[1] - 1) // tiles[1]
    n_tw = (out_dims[2] + tiles[2] - 1) // tiles[2]
    n_tiles = n_td * n_th * n_tw
    s_d, s_h, s_w = stride
    stamp = np.full((Q, padded_dims[0], padded_dims[1], padded_dims[2]), -1, dtype=np.int64)
    macs = 0
    weight_bytes = 0
    inputs = 0
    outputs = 0
    # The footprint only depends on the row and tile, so one batch element is enough
    for item in range(S * n_tiles):
        s = item // n_tiles
        d0, d1, h0, h1, w0, w1 = _tile_bounds(item % n_tiles, n_th, n_tw, tiles, out_dims)
        tile_volume = (d1 - d0) * (h1 - h0) * (w1 - w0)
        m_s = row_sizes[s]
        outputs += m_s * tile_volume
        for loc in range(loc_bounds[s], loc_bounds[s + 1]):
            q = loc_idx[loc, 3]
            n_weights = m_s * ch_size[q]
            if vanilla:
                n_weights *= K_d * K_h * K_w
            macs += n_weights * tile_volume
            weight_bytes += n_weights * itemsize * (1 if location_outer else tile_volume)
            for k in range(K_d * K_h * K_w if vanilla else 1):
                if vanilla:
                    kd = k // (K_h * K_w)
                    kh = (k // K_w) % K_h
                    kw = k % K_w
                else:
                    kd = loc_idx[loc, 0]
                    kh = loc_idx[loc, 1]
                    kw = loc_idx[loc, 2]
                for od in range(d0, d1):
                    for oh in range(h0, h1):
                        for ow in range(w0, w1):
                            pd = od * s_d + kd
                            ph = oh * s_h + kh
                            pw = ow * s_w + kw
                            if stamp[q, pd, ph, pw] != item:
                                stamp[q, pd, ph, pw] = item
                                inputs += ch_size[q]
    return batch * macs, batch * weight_bytes, batch * inputs, batch * outputs


@numba.njit(parallel=True, cache=True)
def _csr_kernel(x, data, indices, indptr, bias, kernel, stride, out_dims, out):
    B = x.shape[0]
    M = indptr.shape[0] - 1
    K_d, K_h, K_w = kernel
    K_s = K_d * K_h * K_w
    s_d, s_h, s_w = stride
    for item in prange(B * M):
        b = item // M
        m = item % M
        for j in range(indptr[m], indptr[m + 1]):
            col = indices[j]
            n = col // K_s
            kd = (col % K_s) // (K_h * K_w)
            kh = (col // K_w) % K_h
            kw = col % K_w
            value = data[j]
            for od in range(out_dims[0]):
                for oh in range(out_dims[1]):
                    for ow in range(out_dims[2]):
                        out[b, m, od, oh, ow] += value * x[b, n, od * s_d + kd, oh * s_h + kh, ow * s_w + kw]
        _add_bias(out, b, m, 0, out_dims[0], 0, out_dims[1], 0, out_dims[2], bias[m])
    return out


@numba.njit(cache=True)
def _csr_count_kernel(batch, padded_dims, N, indices, indptr, kernel, stride, out_dims):
    M = indptr.shape[0] - 1
    K_d, K_h, K_w = kernel
    K_s = K_d * K_h * K_w
    s_d, s_h, s_w = stride
    volume = out_dims[0] * out_dims[1] * out_dims[2]
    stamp = np.full((N, padded_dims[0], padded_dims[1], padded_dims[2]), -1, dtype=np.int64)
    inputs = 0
    for m in range(M):
        for j in range(indptr[m], indptr[m + 1]):
            col = indices[j]
            n = col // K_s
            kd = (col % K_s) // (K_h * K_w)
            kh = (col // K_w) % K_h
            kw = col % K_w
            for od in range(out_dims[0]):
                for oh in range(out_dims[1]):
                    for ow in range(out_dims[2]):
                        pd = od * s_d + kd
                        ph = oh * s_h + kh
                        pw = ow * s_w + kw
                        if stamp[n, pd, ph, pw] != m:
                            stamp[n, pd, ph, pw] = m
                            inputs += 1
    nnz = indptr[M]
    return batch * nnz * volume, batch * nnz * 8, batch * inputs, batch * M * volume


def set_threads(threads: int) -> int:
    """Sets the executor's thread cap (bounded by the threads numba was started with)."""
    available = numba.config.NUMBA_NUM_THREADS
    if threads > available:
        logging.warning(f'Requested {threads} threads but only {available} are available')
    threads = max(1, min(threads, available))
    numba.set_num_threads(threads)
    return threads


def _check_store_spec(input: FeatureMap, store: Union[CompactWeightStore, CsrLayer], spec: ConvSpec):
    if input.dims[1] != store.N:
        raise ValueError(f'Input has {input.dims[1]} channels but the layer expects N={store.N}')
    if tuple(spec.stride) != tuple(store.stride) or tuple(spec.padding) != tuple(store.padding):
        raise ValueError(f'ConvSpec (stride={spec.stride}, padding={spec.padding}) does not match the compiled layer '
                         f'(stride={tuple(store.stride)}, padding={tuple(store.padding)})')
    return conv_output_dims(input.dims[2:], store.kernel, store.stride, store.padding)


def _dtype(precision: str):
    if precision not in PRECISIONS:
        raise ValueError(f'Unknown precision {precision}, expected one of {list(PRECISIONS)}')
    return PRECISIONS[precision]


def _bias(store: Union[CompactWeightStore, CsrLayer], spec: ConvSpec, dtype) -> np.ndarray:
    if spec.bias is not None:
        return spec.bias_numpy(store.M, dtype)
    if store.bias is not None:
        return store.bias.astype(dtype)
    return np.zeros(store.M, dtype=dtype)


def count_ops(store: CompactWeightStore, input_dims: Sequence[int], schedule: Schedule) -> ExecStats:
    """Instrumented counters of a sparse execution (derived from the loop nest, independent of the data)."""
    out_dims = conv_output_dims(input_dims[2:], store.kernel, store.stride, store.padding)
    arrays = _kernel_arrays(store)
    padded = tuple(int(d + 2 * p) for d, p in zip(input_dims[2:], store.padding))
    macs, weight_bytes, inputs, outputs = _count_kernel(
        int(input_dims[0]), padded, arrays.row_sizes, arrays.loc_bounds, arrays.loc_idx, arrays.ch_size,
        tuple(store.kernel), store.scheme == SchemeKind.VANILLA, tuple(store.stride), tuple(out_dims),
        schedule.tiles, schedule.permutation == 'location_tile', 4)
    return ExecStats(int(macs), int(weight_bytes), int(inputs), int(outputs))


def _run_sparse(input: FeatureMap, store: CompactWeightStore, spec: ConvSpec, schedule: Schedule, count: bool,
                precision: str) -> Tuple[FeatureMap, ExecStats]:
    out_dims = _check_store_spec(input, store, spec)
    schedule.check(out_dims, store.g_M)
    dtype = _dtype(precision)
    x = pad_input(input.as_numpy(dtype), store.padding)
    arrays = _kernel_arrays(store)
    out = np.zeros((input.dims[0], store.M) + tuple(out_dims), dtype=dtype)
    set_threads(schedule.threads)

    start = time.perf_counter()
    common = (x, store.weights.astype(dtype), arrays.row_filters, arrays.row_sizes, arrays.loc_bounds, arrays.loc_idx,
              arrays.w_start, arrays.ch_start, arrays.ch_size, _bias(store, spec, dtype))
    loop = (tuple(store.stride), tuple(out_dims), schedule.tiles, schedule.unroll,
            schedule.permutation == 'location_tile', out)
    if store.scheme == SchemeKind.VANILLA:
        _vanilla_kernel(*common, tuple(store.kernel), *loop)
    else:
        _kgs_kernel(*common, *loop)
    wall_time = time.perf_counter() - start

    stats = count_ops(store, input.dims, schedule) if count else ExecStats()
    stats.wall_time = wall_time
    return FeatureMap(torch.from_numpy(out)), stats


def conv3d_sparse(input: FeatureMap, store: CompactWeightStore, spec: ConvSpec, schedule: Schedule,
                  count: bool = True, precision: str = 'float32') -> Tuple[FeatureMap, ExecStats]:
    """Executes a KGS layer in compact weight storage.

    Parameters
    ----------
    input : FeatureMap
        [batch, N, D, H, W] input.
    store : CompactWeightStore
        The compiled layer.
    spec : ConvSpec
        Stride and padding (must match the store); its bias takes precedence over the stored one.
    schedule : Schedule
        Tiles, unroll factor, loop order and thread count.
    count : bool, optional
        If True the counters are computed by a separate instrumented pass, by default True.
    precision : str, optional
        `float32` (fast path) or `float64` (verification build), by default 'float32'.

    Returns
    -------
    Tuple[FeatureMap, ExecStats]
        The output in original filter order and the statistics.
    """
    if store.scheme != SchemeKind.KGS:
        raise ValueError(f'conv3d_sparse expects a KGS store, got {store.scheme.value}')
    return _run_sparse(input, store, spec, schedule, count, precision)


def conv3d_sparse_vanilla(input: FeatureMap, store: CompactWeightStore, spec: ConvSpec, schedule: Schedule,
                          count: bool = True, precision: str = 'float32') -> Tuple[FeatureMap, ExecStats]:
    """Executes a Vanilla layer (whole surviving kernel groups); see `conv3d_sparse`."""
    if store.scheme != SchemeKind.VANILLA:
        raise ValueError(f'conv3d_sparse_vanilla expects a Vanilla store, got {store.scheme.value}')
    return _run_sparse(input, store, spec, schedule, count, precision)


def conv3d_csr(input: FeatureMap, layer: CsrLayer, spec: ConvSpec, threads: int = 1, count: bool = True,
               precision: str = 'float32') -> Tuple[FeatureMap, ExecStats]:
    """Unoptimized sparse baseline: one pass per nonzero weight of the CSR matrix over the whole output."""
    out_dims = _check_store_spec(input, layer, spec)
    dtype = _dtype(precision)
    x = pad_input(input.as_numpy(dtype), layer.padding)
    out = np.zeros((input.dims[0], layer.M) + tuple(out_dims), dtype=dtype)
    matrix = layer.matrix
    set_threads(threads)

    start = time.perf_counter()
    _csr_kernel(x, matrix.data.astype(dtype), matrix.indices.astype(np.int64), matrix.indptr.astype(np.int64),
                _bias(layer, spec, dtype), tuple(layer.kernel), tuple(layer.stride), tuple(out_dims), out)
    wall_time = time.perf_counter() - start

    stats = ExecStats()
    if count:
        padded = tuple(int(d) for d in x.shape[2:])
        stats = ExecStats(*(int(c) for c in _csr_count_kernel(
            input.dims[0], padded, layer.N, matrix.indices.astype(np.int64), matrix.indptr.astype(np.int64),
            tuple(layer.kernel), tuple(layer.stride), tuple(out_dims))))
    stats.wall_time = wall_time
    return FeatureMap(torch.from_numpy(out)), stats


def execute(input: FeatureMap, store: Union[CompactWeightStore, CsrLayer], spec: Optional[ConvSpec] = None,
            schedule: Optional[Schedule] = None, count: bool = False, precision: str = 'float32'
            ) -> Tuple[FeatureMap, ExecStats]:
    """Dispatches on the kind of compiled layer; without a schedule the layer runs untiled on one thread."""
    spec = spec if spec is not None else store.spec
    if isinstance(store, CsrLayer):
        threads = schedule.threads if schedule is not None else 1
        return conv3d_csr(input, store, spec, threads, count, precision)
    if schedule is None:
        schedule = Schedule.untiled(conv_output_dims(input.dims[2:], store.kernel, store.stride, store.padding))
    if store.scheme == SchemeKind.VANILLA:
        return conv3d_sparse_vanilla(input, store, spec, schedule, count, precision)
    return conv3d_sparse(input, store, spec, schedule, count, precision)


def run_stack(input: FeatureMap, stores: Sequence[Union[CompactWeightStore, CsrLayer]],
              specs: Optional[Sequence[ConvSpec]] = None, schedules: Optional[Sequence[Optional[Schedule]]] = None,
              count: bool = False, precision: str = 'float32') -> Tuple[FeatureMap, List[ExecStats]]:
    """Runs a compiled conv stack with a ReLU between consecutive layers."""
    if specs is not None and len(specs) != len(stores):
        raise ValueError(f'Got {len(specs)} specs for {len(stores)} layers')
    if schedules is not None and len(schedules) != len(stores):
        raise ValueError(f'Got {len(schedules)} schedules for {len(stores)} layers')
    stats = []
    x = input
    for i, store in enumerate(stores):
        x, layer_stats = execute(x, store, specs[i] if specs is not None else None,
                                 schedules[i] if schedules is not None else None, count, precision)
        stats.append(layer_stats)
        if i < len(stores) - 1:
            x = FeatureMap(torch.relu(x.data))
    return x, stats


def bench(input_dims: Sequence[int], store: Union[CompactWeightStore, CsrLayer], spec: Optional[ConvSpec] = None,
          schedule: Optional[Schedule] = None, repeats: int = 10, warmup: int = BENCH_WARMUP, seed: int = 0
          ) -> BenchResult:
    """Latency of a compiled layer on a random input.

    Parameters
    ----------
    input_dims : Sequence[int]
        (batch, N, D, H, W) of the input.
    store : Union[CompactWeightStore, CsrLayer]
        The compiled layer.
    spec : ConvSpec, optional
        By default the one stored with the layer.
    schedule : Schedule, optional
        By default untiled on one thread.
    repeats : int, optional
        Number of timed executions, by default 10.
    warmup : int, optional
        Untimed executions before (includes the JIT compilation), by default 3.
    seed : int, optional
        Seed of the random input, by default 0.

    Returns
    -------
    BenchResult
        Per-repeat wall times plus the MAC count of one execution.
    """
    if repeats < 1:
        raise ValueError(f'repeats must be >= 1, got {repeats}')
    rng = np.random.RandomState(seed)
    input = FeatureMap.from_numpy(rng.standard_normal(tuple(input_dims)).astype(np.float32))
    for _ in range(warmup):
        execute(input, store, spec, schedule)
    times = [execute(input, store, spec, schedule)[1].wall_time for _ in range(repeats)]
    _, counted = execute(input, store, spec, schedule, count=True)
    return BenchResult(times, warmup, counted.multiply_accumulates, schedule.threads if schedule is not None else 1)
