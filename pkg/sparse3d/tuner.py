"""Auto-tuning of executor schedules by measured latency."""
from dataclasses import dataclass
import itertools
import json
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from sparse3d.compiler import PERMUTATIONS, UNROLL_FACTORS, CompactWeightStore, Schedule, cws_decode, default_schedule
from sparse3d.sparse_exec import BENCH_WARMUP, bench, execute
from sparse3d.tensor_core import ConvSpec, FeatureMap, conv3d_dense, conv_output_dims

TIE_TOLERANCE = 0.03


def tile_options(extent: int) -> List[int]:
    """Powers of two below the extent plus the extent itself."""
    options = [1 << i for i in range(extent.bit_length()) if 1 << i < extent]
    return options + [extent]


@dataclass
class TuneSpace:
    """Candidate values per schedule field, the output extents and group size they must be legal for, and the
    maximum number of trials."""
    output_dims: Tuple[int, int, int]
    g_M: int
    tile_d: Sequence[int] = ()
    tile_h: Sequence[int] = ()
    tile_w: Sequence[int] = ()
    unrolls: Sequence[int] = UNROLL_FACTORS
    permutations: Sequence[str] = PERMUTATIONS
    threads: Sequence[int] = (1,)
    budget: int = 200
    seed: int = 0

    def __post_init__(self):
        self.output_dims = tuple(self.output_dims)
        self.tile_d = tuple(self.tile_d) or tuple(tile_options(self.output_dims[0]))
        self.tile_h = tuple(self.tile_h) or tuple(tile_options(self.output_dims[1]))
        self.tile_w = tuple(self.tile_w) or tuple(tile_options(self.output_dims[2]))
        if self.budget < 1:
            raise ValueError(f'The budget must be >= 1, got {self.budget}')

    @staticmethod
    def for_layer(store: CompactWeightStore, input_dims: Sequence[int], threads: Sequence[int] = (1,),
                  budget: int = 200, seed: int = 0) -> 'TuneSpace':
        out = conv_output_dims(input_dims[2:], store.kernel, store.stride, store.padding)
        return TuneSpace(out, store.g_M, threads=tuple(threads), budget=budget, seed=seed)


def enumerate_space(space: TuneSpace) -> List[Schedule]:
    """Deterministic list of the legal schedules of a space, uniformly subsampled (seeded) down to the budget.

    Raises
    ------
    ValueError
        If no candidate is legal.
    """
    candidates = [
        Schedule(tile_d, tile_h, tile_w, unroll, permutation, threads)
        for permutation, threads, tile_d, tile_h, tile_w, unroll in itertools.product(
            space.permutations, space.threads, space.tile_d, space.tile_h, space.tile_w, space.unrolls)
    ]
    candidates = [c for c in candidates if c.is_legal(space.output_dims, space.g_M)]
    if not candidates:
        raise ValueError(f'No legal schedule in the tuning space for output {space.output_dims} and g_M={space.g_M}')
    if len(candidates) > space.budget:
        rng = np.random.RandomState(space.seed)
        keep = np.sort(rng.choice(len(candidates), space.budget, replace=False))
        candidates = [candidates[i] for i in keep]
    return candidates


def tune(store: CompactWeightStore, spec: ConvSpec, input_dims: Sequence[int], space: Optional[TuneSpace] = None,
         repeats: int = 10, warmup: int = BENCH_WARMUP, seed: int = 0, rtol: float = 1e-5,
         include_default: bool = True) -> Tuple[Schedule, pd.DataFrame]:
    """Benchmarks every candidate (plus the default schedule) and returns the one with the lowest median latency.

    Every candidate is first compared once against the dense oracle; failing candidates are excluded but reported.

    Parameters
    ----------
    store : CompactWeightStore
        The compiled layer.
    spec : ConvSpec
        Stride, padding and bias of the layer.
    input_dims : Sequence[int]
        (batch, N, D, H, W) of the input.
    space : TuneSpace, optional
        By default `TuneSpace.for_layer(store, input_dims)`.
    repeats : int, optional
        Timed executions per candidate, by default 10.
    warmup : int, optional
        Untimed executions per candidate, by default 3.
    seed : int, optional
        Seed of the spot-check input, by default 0.
    rtol : float, optional
        Tolerance of the spot-check relative to the largest reference magnitude, by default 1e-5.
    include_default : bool, optional
        Whether the default schedule joins the candidates, by default True.

    Returns
    -------
    Tuple[Schedule, pd.DataFrame]
        The winner and one report row per candidate.
    """
    space = space if space is not None else TuneSpace.for_layer(store, input_dims)
    candidates = enumerate_space(space)
    default = default_schedule(store, space.output_dims, threads=space.threads[0])
    if include_default and default not in candidates:
        candidates.insert(0, default)

    rng = np.random.RandomState(seed)
    input = FeatureMap.from_numpy(rng.standard_normal(tuple(input_dims)).astype(np.float32))
    weights, _, _ = cws_decode(store)
    bias = spec.bias if spec.bias is not None else store.spec.bias
    reference = conv3d_dense(input, weights, ConvSpec(spec.stride, spec.padding, bias)).as_numpy()
    atol = rtol * max(float(np.abs(reference).max()), 1.)

    rows = []
    for candidate in tqdm(candidates, desc='Tuning schedules...'):
        output, stats = execute(input, store, spec, candidate, count=True)
        error = float(np.abs(output.as_numpy() - reference).max())
        row = dict(candidate.to_dict(), passed=error <= atol, max_error=error, is_default=candidate == default,
                   multiply_accumulates=stats.multiply_accumulates, median=np.nan, mean=np.nan, min=np.nan)
        if row['passed']:
            result = bench(input_dims, store, spec, candidate, repeats, warmup, seed)
            row.update(median=result.median, mean=result.mean, min=result.min)
        else:
            logging.warning(f'Schedule {candidate} failed the oracle check (max error {error:.3e} > {atol:.3e})')
        rows.append(row)

    report = pd.DataFrame(rows)
    passed = report[report.passed]
    if passed.empty:
        raise RuntimeError('No candidate schedule passed the oracle check')
    best_idx = passed['median'].idxmin()
    best = candidates[best_idx]
    report['winner'] = report.index == best_idx
    report['tie'] = report.passed & (report['median'] <= (1 + TIE_TOLERANCE) * report.loc[best_idx, 'median'])
    if report.tie.sum() > 1:
        logging.info(f'{report.tie.sum() - 1} schedules within {TIE_TOLERANCE:.0%} of the winner')
    logging.info(f'Best schedule {best} with median {report.loc[best_idx, "median"]:.3e}s '
                 f'(default: {report[report.is_default]["median"].min():.3e}s)')
    return best, report


def save_schedules(path: str, schedules: Sequence[Optional[Schedule]], meta: Optional[Dict[str, Any]] = None):
    with open(path, 'w') as f:
        json.dump(dict(meta=meta or {}, layers=[None if s is None else s.to_dict() for s in schedules]), f, indent=2)


def load_schedules(path: str) -> List[Optional[Schedule]]:
    with open(path, 'r') as f:
        raw = json.load(f)
    layers = raw['layers'] if isinstance(raw, dict) else raw
    return [None if layer is None else Schedule(**layer) for layer in layers]
