"""Command line interface: `sparse3d <train|prune|compile|tune|run|bench|experiment> ...`."""
import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import yaml

from sparse3d.compiler import CompactWeightStore, Schedule, csr_nbytes, load_cws_model, save_cws_model
from sparse3d.experiment import ExperimentConfig, run_experiment
from sparse3d.helper.formats import (FormatError, load_masks, load_model_container, load_tensor, save_masks,
                                     save_model_container, save_tensor)
from sparse3d.helper.io import Storage
from sparse3d.helper.local import setup_logging
from sparse3d.models import ARCHS, MODEL_TYPE
from sparse3d.pipeline import bench_stack, compile_model, dense_masks, load_data, prune, train_dense
from sparse3d.pruning import ALGORITHMS, PruneConfig, model_stats
from sparse3d.sparse_exec import BENCH_WARMUP, PRECISIONS, run_stack
from sparse3d.sparsity import SchemeKind
from sparse3d.tensor_core import FeatureMap, conv_output_dims
from sparse3d.train import TrainConfig, evaluate_accuracy
from sparse3d.tuner import TuneSpace, load_schedules, save_schedules, tune


def _emit(summary: Dict[str, Any]):
    print(json.dumps(summary, indent=2, default=str))


def _model_data(model: MODEL_TYPE, seed: int, n_samples: int):
    channels, depth, height, width = model.input_dims
    return load_data(seed, n_samples, channels=channels, depth=depth, height=height, width=width,
                     n_classes=model.n_classes)


def _stack_input_dims(stores: Sequence[CompactWeightStore], batch_size: int, spatial: Sequence[int]
                      ) -> List[Tuple[int, int, int, int, int]]:
    dims = []
    spatial = tuple(spatial)
    for store in stores:
        dims.append((batch_size, store.N) + spatial)
        spatial = conv_output_dims(spatial, store.kernel, store.stride, store.padding)
    return dims


def cmd_train(args: argparse.Namespace) -> int:
    channels, depth, height, width = args.clip_dims
    data_train, data_eval = load_data(args.seed, args.n_samples, channels=channels, depth=depth, height=height,
                                      width=width)
    model_params = dict(arch=args.arch, input_dims=list(args.clip_dims), n_channels=channels,
                        n_classes=data_train.n_classes)
    train_config = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                               lr_schedule=args.lr_schedule)
    storage = Storage(args.cache_dir) if args.cache_dir else None
    model, cached = train_dense(model_params, train_config, data_train, data_eval, storage=storage,
                                log_path=args.log)
    accuracy = evaluate_accuracy(model, data_eval)
    save_model_container(args.out, model, meta=dict(seed=args.seed, epochs=args.epochs, accuracy=accuracy))
    _emit(dict(model=args.out, accuracy=accuracy, from_cache=cached))
    return 0


def cmd_prune(args: argparse.Namespace) -> int:
    model = load_model_container(args.model)
    data_train, data_eval = _model_data(model, args.seed, args.n_samples)
    params = dict(algo=args.algo, scheme=args.scheme, target_rate=args.target_rate, g_M=args.g_m, g_N=args.g_n,
                  prune_epochs=args.prune_epochs, retrain_epochs=args.retrain_epochs, seed=args.seed,
                  allow_dead_layers=args.allow_dead_layers)
    if args.lambda_ is not None:
        params['lambda'] = args.lambda_
    config = PruneConfig.from_dict(params)
    dense_accuracy = evaluate_accuracy(model, data_eval)
    result = prune(model, config, data_train, data_eval, log_path=args.log)
    stats = model_stats(result.model, result.masks)
    accuracy = evaluate_accuracy(result.model, data_eval)

    save_masks(args.masks, result.masks)
    if args.out:
        save_model_container(args.out, result.model, meta=dict(config.to_dict(), accuracy=accuracy,
                                                               flops_rate=stats.flops_rate))
    _emit(dict(masks=args.masks, model=args.out, dense_accuracy=dense_accuracy, accuracy=accuracy,
               flops_rate=stats.flops_rate, param_rate=stats.param_rate))
    return 0


def cmd_compile(args: argparse.Namespace) -> int:
    model = load_model_container(args.model)
    masks = load_masks(args.masks) if args.masks else dense_masks(model, args.g_m, args.g_n)
    if len(masks) != model.n_layers:
        raise ValueError(f'Got {len(masks)} masks for a model with {model.n_layers} conv layers')
    stores = compile_model(model, masks, reorder=not args.no_reorder)
    save_cws_model(args.out, stores)

    layers = []
    for store, weights, mask in zip(stores, model.conv_weights(), masks):
        layers.append(dict(layer=store.layer_id, scheme=store.scheme.value, locations=store.n_locations,
                           cws_bytes=store.payload_nbytes(), csr_bytes=csr_nbytes(weights, mask)))
        logging.info(f'Layer {store.layer_id}: {layers[-1]["cws_bytes"]} CWS bytes vs '
                     f'{layers[-1]["csr_bytes"]} CSR bytes')
    _emit(dict(cws=args.out, layers=layers))
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    stores = load_cws_model(args.cws)
    schedules, reports = [], []
    for store, dims in zip(stores, _stack_input_dims(stores, args.batch_size, args.input_dims)):
        space = TuneSpace.for_layer(store, dims, threads=args.threads, budget=args.budget, seed=args.seed)
        best, report = tune(store, store.spec, dims, space, repeats=args.repeats, warmup=args.warmup,
                            seed=args.seed)
        schedules.append(best)
        reports.append(report.assign(layer=store.layer_id))
    save_schedules(args.out, schedules, meta=dict(cws=args.cws, batch_size=args.batch_size,
                                                  input_dims=list(args.input_dims)))
    if args.report:
        pd.concat(reports, ignore_index=True).to_csv(args.report, index=False)
    _emit(dict(schedules=args.out, layers=[s.to_dict() for s in schedules]))
    return 0


def _stack_schedules(stores: Sequence[CompactWeightStore], path: Optional[str], input_dims: Sequence[int],
                     threads: Optional[int]) -> List[Optional[Schedule]]:
    """Loaded (or untiled) schedules per layer; `threads` replaces the thread count of every layer."""
    schedules = load_schedules(path) if path else [None] * len(stores)
    if len(schedules) != len(stores):
        raise ValueError(f'Got {len(schedules)} schedules for {len(stores)} layers')
    if threads is None:
        return schedules
    if threads < 1:
        raise ValueError(f'threads must be >= 1, got {threads}')
    layer_dims = _stack_input_dims(stores, input_dims[0], input_dims[2:])
    out = []
    for store, schedule, dims in zip(stores, schedules, layer_dims):
        if schedule is None:
            schedule = Schedule.untiled(conv_output_dims(dims[2:], store.kernel, store.stride, store.padding))
        out.append(dataclasses.replace(schedule, threads=threads))
    return out


def cmd_run(args: argparse.Namespace) -> int:
    stores = load_cws_model(args.cws)
    input = FeatureMap(load_tensor(args.input))
    schedules = _stack_schedules(stores, args.schedules, input.dims, args.threads)
    output, stats = run_stack(input, stores, schedules=schedules, count=args.count, precision=args.precision)
    out = args.out if args.out else os.path.splitext(args.input)[0] + '.out.bin'
    save_tensor(out, output.data)
    _emit(dict(output=out, dims=list(output.dims), layers=[s.to_dict() for s in stats],
               schedules=[None if s is None else s.to_dict() for s in schedules]))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    stores = load_cws_model(args.cws)
    input_dims = _stack_input_dims(stores, args.batch_size, args.input_dims)[0]
    schedules = _stack_schedules(stores, args.schedules, input_dims, args.threads)
    result = bench_stack(stores, schedules, input_dims, args.repeats, args.warmup, args.seed)
    _emit(result.to_dict())
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    params: Dict[str, Any] = {}
    if args.config:
        with open(args.config, 'r') as f:
            params = yaml.safe_load(f) or {}
    params.update(args.kwargs)
    if args.parallel_cells is not None:
        params['parallel_cells'] = args.parallel_cells
    if args.output_dir is not None:
        params['output_dir'] = args.output_dir
    config = ExperimentConfig.from_dict(params)
    setup_logging(args.debug_level, log_file=os.path.join(config.output_dir, 'experiment.log'))
    report = run_experiment(config)
    _emit(dict(config_hash=report.config_hash, cells=len(report.results), failed=report.n_failed, files=report.files))
    return 1 if report.n_failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='sparse3d', description='Structured pruning and sparse execution of 3D CNNs.',
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('--debug-level', type=str, default='info', help='One of debug, info, warning or error.')
    subparsers = parser.add_subparsers(dest='command', required=True)

    def add(name: str, handler, help: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help, description=help,
                                    formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sub.set_defaults(handler=handler)
        return sub

    sub = add('train', cmd_train, 'Train the dense baseline on the synthetic clips and write a model container.')
    sub.add_argument('--arch', type=str, default='tiny3d', choices=list(ARCHS), help='Conv layer stack.')
    sub.add_argument('--seed', type=int, default=0, help='Seed of data, initialization and batch order.')
    sub.add_argument('--epochs', type=int, default=30, help='Training epochs.')
    sub.add_argument('--lr', type=float, default=5e-2, help='Learning rate.')
    sub.add_argument('--lr-schedule', type=str, default='fixed', choices=['fixed', 'cosine'], help='Schedule.')
    sub.add_argument('--batch-size', type=int, default=16, help='Mini-batch size.')
    sub.add_argument('--n-samples', type=int, default=512, help='Generated clips (train and held-out).')
    sub.add_argument('--clip-dims', type=int, nargs=4, default=[3, 8, 12, 12], metavar=('C', 'D', 'H', 'W'),
                     help='Channels, depth, height and width of a clip.')
    sub.add_argument('--cache-dir', type=str, default='cache', help='Storage of dense baselines ("" disables).')
    sub.add_argument('--log', type=str, default=None, help='JSON-lines file of the per-epoch records.')
    sub.add_argument('--out', type=str, required=True, help='Stem of the model container.')

    sub = add('prune', cmd_prune, 'Prune a trained model and write the masks (and the retrained model).')
    sub.add_argument('--model', type=str, required=True, help='Model container of the dense model.')
    sub.add_argument('--algo', type=str, default='reweighted', choices=list(ALGORITHMS), help='Pruning algorithm.')
    sub.add_argument('--scheme', type=str, default='kgs', choices=[s.value for s in SchemeKind],
                     help='Sparsity scheme.')
    sub.add_argument('--target-rate', type=float, default=2.0, help='Requested FLOPs reduction.')
    sub.add_argument('--gm', '--g-m', dest='g_m', type=int, default=4, help='Filters per kernel group.')
    sub.add_argument('--gn', '--g-n', dest='g_n', type=int, default=4, help='Input channels per kernel group.')
    sub.add_argument('--lambda', dest='lambda_', type=float, default=None, help='Regularization strength.')
    sub.add_argument('--prune-epochs', type=int, default=5, help='Epochs per regularized round.')
    sub.add_argument('--epochs', '--retrain-epochs', dest='retrain_epochs', type=int, default=20,
                     help='Masked retraining epochs.')
    sub.add_argument('--allow-dead-layers', action='store_true', help='Allow fully pruned layers.')
    sub.add_argument('--seed', type=int, default=0, help='Seed of data and pruning.')
    sub.add_argument('--n-samples', type=int, default=512, help='Generated clips (train and held-out).')
    sub.add_argument('--log', type=str, default=None, help='JSON-lines file of the per-epoch records.')
    sub.add_argument('--mask', '--masks', dest='masks', type=str, required=True, help='Output mask file.')
    sub.add_argument('--out', type=str, default=None, help='Stem of the pruned model container.')

    sub = add('compile', cmd_compile, 'Reorder and encode a (pruned) model in compact weight storage.')
    sub.add_argument('--model', type=str, required=True, help='Model container.')
    sub.add_argument('--mask', '--masks', dest='masks', type=str, default=None,
                     help='Mask file (default: all-true KGS masks).')
    sub.add_argument('--gm', '--g-m', dest='g_m', type=int, default=4, help='Filters per group of the default masks.')
    sub.add_argument('--gn', '--g-n', dest='g_n', type=int, default=4,
                     help='Input channels per group of the default masks.')
    sub.add_argument('--no-reorder', action='store_true', help='Keep the identity filter order.')
    sub.add_argument('--out', type=str, required=True, help='Output .cws file.')

    def add_stack_args(sub: argparse.ArgumentParser):
        sub.add_argument('--model', '--cws', dest='cws', type=str, required=True, help='Compiled .cws model.')
        sub.add_argument('--batch-size', type=int, default=1, help='Batch size of the input.')
        sub.add_argument('--input-dims', type=int, nargs=3, default=[8, 12, 12], metavar=('D', 'H', 'W'),
                         help='Spatial dims of the input of the first layer.')
        sub.add_argument('--repeats', type=int, default=10, help='Timed executions.')
        sub.add_argument('--warmup', type=int, default=BENCH_WARMUP, help='Untimed executions before timing.')
        sub.add_argument('--seed', type=int, default=0, help='Seed of the random inputs (and the subsampling).')

    sub = add('tune', cmd_tune, 'Search the schedule of every layer by measured latency.')
    add_stack_args(sub)
    sub.add_argument('--threads', type=int, nargs='+', default=[1], help='Thread counts to try.')
    sub.add_argument('--budget', type=int, default=200, help='Maximum candidates per layer.')
    sub.add_argument('--report', type=str, default=None, help='CSV of all candidates.')
    sub.add_argument('--out', type=str, required=True, help='Output schedules JSON.')

    sub = add('run', cmd_run, 'Execute a compiled model stack on an input tensor file.')
    sub.add_argument('--model', '--cws', dest='cws', type=str, required=True, help='Compiled .cws model.')
    sub.add_argument('--schedule', '--schedules', dest='schedules', type=str, default=None,
                     help='Schedules JSON (default: untiled).')
    sub.add_argument('--input', type=str, required=True, help='Input tensor file.')
    sub.add_argument('--precision', type=str, default='float32', choices=list(PRECISIONS), help='Accumulation type.')
    sub.add_argument('--stats', '--count', dest='count', action='store_true', help='Report the instrumented counters.')
    sub.add_argument('--threads', type=int, default=None,
                     help='Executor threads; overrides the thread count of the loaded schedules.')
    sub.add_argument('--out', type=str, default=None, help='Output tensor file (default: <input>.out.bin).')

    sub = add('bench', cmd_bench, 'Median latency of a compiled model stack on a random input.')
    add_stack_args(sub)
    sub.add_argument('--schedule', '--schedules', dest='schedules', type=str, default=None,
                     help='Schedules JSON (default: untiled).')
    sub.add_argument('--threads', type=int, default=None,
                     help='Executor threads; overrides the thread count of the loaded schedules.')

    sub = add('experiment', cmd_experiment, 'Run the seed x algorithm x scheme x rate matrix and write the reports.')
    sub.add_argument('--config', type=str, default=None, help='YAML with the fields of ExperimentConfig.')
    sub.add_argument('--kwargs', type=json.loads, default='{}', help='Will overwrite the loaded config.')
    sub.add_argument('--parallel-cells', type=int, default=None, help='Cells run in separate processes.')
    sub.add_argument('--output-dir', type=str, default=None, help='Directory of the reports.')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.debug_level)
    logging.debug(args)
    try:
        return args.handler(args)
    except (FormatError, ValueError, FileNotFoundError) as e:
        logging.error(f'{args.command} failed: {e}')
        return 2


if __name__ == '__main__':
    sys.exit(main())
