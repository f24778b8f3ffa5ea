"""Experiment harness: runs the (seed x algorithm x scheme x rate) matrix through the whole pipeline and writes the
accuracy/latency tables, the per-seed win counts and the optimisation-level ablation.
"""
from dataclasses import asdict, dataclass, field, fields
import itertools
import json
import logging
import math
import multiprocessing
import os
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from sparse3d.compiler import OPT_LEVELS
from sparse3d.helper.io import Storage
from sparse3d.helper.utils import config_hash
from sparse3d.models import ARCHS, create_model
from sparse3d.pipeline import (bench_stack, compile_for_level, compiled_accuracy, dense_masks, load_data, prune,
                               train_dense)
from sparse3d.pruning import ALGORITHMS, PruneConfig, model_stats
from sparse3d.sparsity import SchemeKind
from sparse3d.train import TrainConfig, evaluate_accuracy

SCHEME_ORDER = ('kgs', 'vanilla', 'filter')
ALGO_ORDER = ('reweighted', 'reg', 'heuristic')
EFFICIENCY_BAND = (0.5, 1.05)


@dataclass
class ExperimentConfig:
    """The experiment matrix plus the budgets of every stage.

    `prune` overrides `PruneConfig` fields (e.g. `prune_epochs`, `retrain_epochs`, `lambda`, `g_M`); algorithm,
    scheme, target rate and seed are set per cell.
    """
    seeds: Sequence[int] = (0,)
    algorithms: Sequence[str] = ('reweighted',)
    schemes: Sequence[str] = ('kgs',)
    target_rates: Sequence[float] = (2.0,)
    arch: str = 'tiny3d'
    model_params: Dict[str, Any] = field(default_factory=dict)
    n_samples: int = 512
    train_epochs: int = 30
    train_lr: float = 5e-2
    batch_size: int = 16
    prune: Dict[str, Any] = field(default_factory=dict)
    opt_level: str = 'tuned'
    ablation: bool = False
    threads: int = 1
    bench_batch_size: int = 1
    bench_repeats: int = 10
    tune_budget: int = 50
    tune_repeats: int = 5
    min_win_share: float = 0.6
    output_dir: str = os.path.join('output', 'experiment')
    cache_dir: str = 'cache'
    parallel_cells: int = 1

    def __post_init__(self):
        for name in ('seeds', 'algorithms', 'schemes', 'target_rates'):
            if len(getattr(self, name)) == 0:
                raise ValueError(f'The experiment matrix is empty: no {name} given')
            setattr(self, name, list(getattr(self, name)))
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f'Seeds must be distinct, got {self.seeds}')
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ValueError(f'Unknown pruning algorithm {algo}, expected one of {ALGORITHMS}')
        self.schemes = [SchemeKind(scheme).value for scheme in self.schemes]
        if self.arch not in ARCHS:
            raise ValueError(f'Unknown architecture {self.arch}, expected one of {list(ARCHS)}')
        if self.opt_level not in OPT_LEVELS:
            raise ValueError(f'Unknown optimisation level {self.opt_level}, expected one of {OPT_LEVELS}')
        if self.parallel_cells < 1:
            raise ValueError(f'parallel_cells must be >= 1, got {self.parallel_cells}')

    @staticmethod
    def from_dict(params: Dict[str, Any]) -> 'ExperimentConfig':
        unknown = set(params) - {f.name for f in fields(ExperimentConfig)}
        if unknown:
            raise ValueError(f'Unknown experiment config keys {sorted(unknown)}')
        return ExperimentConfig(**params)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def cells(self) -> List[Tuple[int, str, str, float]]:
        return list(itertools.product(self.seeds, self.algorithms, self.schemes, self.target_rates))


@dataclass
class ExperimentReport:
    results: pd.DataFrame
    wins: pd.DataFrame
    ablation: pd.DataFrame
    config_hash: str
    files: Dict[str, str]

    @property
    def n_failed(self) -> int:
        return int((self.results.status != 'ok').sum()) if len(self.results) else 0


def _model_params(config: ExperimentConfig, input_dims: Sequence[int], n_classes: int) -> Dict[str, Any]:
    return dict(config.model_params, arch=config.arch, input_dims=list(input_dims), n_channels=input_dims[0],
                n_classes=n_classes)


def _dense_baseline(config: ExperimentConfig, seed: int):
    data_train, data_eval = load_data(seed, config.n_samples)
    train_config = TrainConfig(epochs=config.train_epochs, lr=config.train_lr, batch_size=config.batch_size,
                               seed=seed)
    model_params = _model_params(config, data_train.clip_dims, data_train.n_classes)
    model, _ = train_dense(model_params, train_config, data_train, data_eval, storage=Storage(config.cache_dir),
                           log_path=os.path.join(config.output_dir, 'logs', f'dense_seed{seed}.jsonl'))
    return model, data_train, data_eval


def run_cell(config: ExperimentConfig, seed: int, algo: str, scheme: str, target_rate: float
             ) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """Runs one cell (dense baseline from the cache, prune, compile, tune, bench).

    Returns
    -------
    Tuple[Dict[str, Any], List[Dict[str, Any]]]
        The result row and the ablation rows; a failing stage yields a row with status `failed`.
    """
    row = dict(seed=seed, algo=algo, scheme=scheme, target_rate=target_rate, status='ok', error='')
    ablation = []
    try:
        dense, data_train, data_eval = _dense_baseline(config, seed)
        row['dense_accuracy'] = evaluate_accuracy(dense, data_eval)

        model = create_model(dense.hyperparams())
        model.load_state_dict(dense.state_dict())
        prune_config = PruneConfig.from_dict(dict(config.prune, algo=algo, scheme=scheme, target_rate=target_rate,
                                                  seed=seed))
        log_path = os.path.join(config.output_dir, 'logs', f'{algo}_{scheme}_{target_rate}_seed{seed}.jsonl')
        result = prune(model, prune_config, data_train, data_eval, log_path)
        stats = model_stats(result.model, result.masks)
        row.update(flops_rate=stats.flops_rate, param_rate=stats.param_rate,
                   accuracy=evaluate_accuracy(result.model, data_eval))

        input_dims = result.model.layer_input_dims(config.bench_batch_size)[0]
        levels = OPT_LEVELS if config.ablation else (config.opt_level,)
        compile_kwargs = dict(batch_size=config.bench_batch_size, threads=config.threads,
                              tune_budget=config.tune_budget, tune_repeats=config.tune_repeats, seed=seed)
        baseline = dense_masks(dense, prune_config.g_M, prune_config.g_N)
        for level in levels:
            layers, schedules, _ = compile_for_level(result.model, result.masks, level, **compile_kwargs)
            sparse = bench_stack(layers, schedules, input_dims, config.bench_repeats)
            dense_layers, dense_schedules, _ = compile_for_level(dense, baseline, level, **compile_kwargs)
            dense_bench = bench_stack(dense_layers, dense_schedules, input_dims, config.bench_repeats)
            ablation.append(dict(seed=seed, algo=algo, scheme=scheme, target_rate=target_rate, level=level,
                                 dense_latency=dense_bench.median, sparse_latency=sparse.median,
                                 flops_rate=stats.flops_rate))
            if level == config.opt_level:
                row.update(dense_latency=dense_bench.median, sparse_latency=sparse.median,
                           dense_macs=dense_bench.multiply_accumulates, sparse_macs=sparse.multiply_accumulates,
                           mac_reduction=dense_bench.multiply_accumulates / max(sparse.multiply_accumulates, 1),
                           compiled_accuracy=compiled_accuracy(layers, schedules, result.model, data_eval))
    except Exception as e:
        logging.exception(e)
        logging.error(f'Failed to run cell seed={seed}, algo={algo}, scheme={scheme}, target_rate={target_rate}')
        row.update(status='failed', error=repr(e))
    return row, ablation


def _run_cell_star(args):
    return run_cell(*args)


def report_speedup(results: Union[pd.DataFrame, Sequence[Dict[str, Any]]]) -> pd.DataFrame:
    """Adds `speedup = dense / sparse latency` and `efficiency = speedup / flops_rate` with a flag outside the
    expected efficiency band."""
    table = pd.DataFrame(results).copy()
    if table.empty:
        return table.assign(speedup=[], efficiency=[], efficiency_flag=[])
    for column in ('dense_latency', 'sparse_latency', 'flops_rate'):
        if column not in table:
            table[column] = np.nan
    table['speedup'] = table['dense_latency'] / table['sparse_latency']
    table['efficiency'] = table['speedup'] / table['flops_rate']
    low, high = EFFICIENCY_BAND
    table['efficiency_flag'] = ''
    table.loc[table.efficiency < low, 'efficiency_flag'] = 'low'
    table.loc[table.efficiency > high, 'efficiency_flag'] = 'high'
    for _, flagged in table[table.efficiency_flag != ''].iterrows():
        logging.warning(f'Efficiency {flagged.efficiency:.3f} outside of [{low}, {high}] '
                        f'(speedup {flagged.speedup:.3f} at flops_rate {flagged.flops_rate:.3f})')
    return table


def _pairwise_wins(results: pd.DataFrame, fixed: str, compared: str, order: Sequence[str],
                   min_win_share: float) -> List[Dict[str, Any]]:
    rows = []
    for (group, rate), cell in results.groupby([fixed, 'target_rate']):
        accuracy = cell.pivot_table(index='seed', columns=compared, values='accuracy')
        present = [name for name in order if name in accuracy.columns]
        for better, worse in zip(present[:-1], present[1:]):
            paired = accuracy[[better, worse]].dropna()
            n_pairs = len(paired)
            wins = int((paired[better] >= paired[worse]).sum())
            mean_better, mean_worse = paired[better].mean(), paired[worse].mean()
            violation = n_pairs > 0 and (wins < math.ceil(min_win_share * n_pairs) or mean_better < mean_worse)
            if violation:
                logging.warning(f'Ordering {better} >= {worse} violated for {fixed}={group} at rate {rate}: '
                                f'{wins}/{n_pairs} wins, mean accuracy {mean_better:.4f} vs {mean_worse:.4f}')
            rows.append(dict(within=fixed, group=group, target_rate=rate, better=better, worse=worse, wins=wins,
                             pairs=n_pairs, mean_better=mean_better, mean_worse=mean_worse, violation=violation))
    return rows


def win_counts(results: pd.DataFrame, min_win_share: float = 0.6) -> pd.DataFrame:
    """Per-seed pairwise wins of the expected orderings KGS >= Vanilla >= Filter (within each algorithm) and
    reweighted >= reg >= heuristic (within each scheme)."""
    columns = ['within', 'group', 'target_rate', 'better', 'worse', 'wins', 'pairs', 'mean_better', 'mean_worse',
               'violation']
    ok = results[results.status == 'ok'] if 'status' in results else results
    if ok.empty or 'accuracy' not in ok:
        return pd.DataFrame(columns=columns)
    rows = (_pairwise_wins(ok, 'algo', 'scheme', SCHEME_ORDER, min_win_share)
            + _pairwise_wins(ok, 'scheme', 'algo', ALGO_ORDER, min_win_share))
    return pd.DataFrame(rows, columns=columns)


def _render(table: pd.DataFrame) -> pd.DataFrame:
    return table.applymap(lambda v: f'{v:.6g}' if isinstance(v, float) else v)


def write_table(table: pd.DataFrame, path_stem: str, title: str, digest: str) -> Dict[str, str]:
    """Writes the same rendered numbers as `<stem>.csv` and `<stem>.md`."""
    rendered = _render(table)
    csv_path, md_path = f'{path_stem}.csv', f'{path_stem}.md'
    rendered.to_csv(csv_path, index=False)
    with open(md_path, 'w') as f:
        f.write(f'# {title}\n\nconfig sha256: `{digest}`\n\n')
        f.write(rendered.to_markdown(index=False, disable_numparse=True) if len(rendered) else '(no rows)')
        f.write('\n')
    return {f'{os.path.basename(path_stem)}_csv': csv_path, f'{os.path.basename(path_stem)}_md': md_path}


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Runs every cell of the matrix and writes the reports to `config.output_dir`.

    Returns
    -------
    ExperimentReport
        The tables, the config hash and the written files; failed cells are part of the results table.
    """
    os.makedirs(os.path.join(config.output_dir, 'logs'), exist_ok=True)
    digest = config_hash(config.to_dict())
    logging.info(f'Running experiment {digest[:12]} with config {config.to_dict()}')
    with open(os.path.join(config.output_dir, 'config.json'), 'w') as f:
        json.dump(dict(config=config.to_dict(), sha256=digest), f, indent=2)

    cells = config.cells()
    if config.parallel_cells > 1:
        # Dense baselines are trained up front so the worker processes only read the cache
        for seed in config.seeds:
            try:
                _dense_baseline(config, seed)
            except Exception as e:
                logging.exception(e)
                logging.error(f'Failed to train the dense baseline of seed {seed}')
        # numba's threading layer is not fork-safe
        with multiprocessing.get_context('spawn').Pool(config.parallel_cells) as pool:
            outputs = pool.map(_run_cell_star, [(config, *cell) for cell in cells])
    else:
        outputs = [run_cell(config, *cell) for cell in tqdm(cells, desc='Running cells...')]

    results = report_speedup([row for row, _ in outputs]) if outputs else pd.DataFrame()
    results['config_hash'] = digest
    ablation = pd.DataFrame([entry for _, entries in outputs for entry in entries])
    if not ablation.empty:
        ablation['speedup'] = ablation.dense_latency / ablation.sparse_latency
    wins = win_counts(results, config.min_win_share)

    files = {}
    files.update(write_table(results, os.path.join(config.output_dir, 'results'), 'Pruning results', digest))
    files.update(write_table(wins, os.path.join(config.output_dir, 'wins'), 'Per-seed win counts', digest))
    if not ablation.empty:
        files.update(write_table(ablation, os.path.join(config.output_dir, 'ablation'), 'Optimisation levels',
                                 digest))
    report = ExperimentReport(results, wins, ablation, digest, files)
    if report.n_failed:
        logging.error(f'{report.n_failed} of {len(cells)} cells failed')
    return report
