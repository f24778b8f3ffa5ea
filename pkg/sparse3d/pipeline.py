"""The stages of the end-to-end pipeline: train the dense baseline, prune, compile, tune and benchmark a model."""
import json
import logging
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from sparse3d.compiler import (OPT_LEVELS, CompactWeightStore, CsrLayer, Schedule, csr_encode, cws_encode,
                               default_schedule, hwr_reorder)
from sparse3d.data import SyntheticVideoDataset, prep_dataset
from sparse3d.helper.io import Storage
from sparse3d.models import MODEL_TYPE, create_model
from sparse3d.pruning import PruneConfig, PruneResult, prune_model
from sparse3d.sparse_exec import BENCH_WARMUP, BenchResult, execute, run_stack
from sparse3d.sparsity import GroupMask, SchemeKind, scheme_partition
from sparse3d.tensor_core import FeatureMap, conv_output_dims
from sparse3d.train import TrainConfig, evaluate_accuracy, train_epochs
from sparse3d.tuner import TuneSpace, tune

CompiledLayer = Union[CompactWeightStore, CsrLayer]


def load_data(seed: int, n_samples: int = 512, test_size: float = 0.25, **kwargs
              ) -> Tuple[SyntheticVideoDataset, SyntheticVideoDataset]:
    return prep_dataset(n_samples=n_samples, seed=seed, test_size=test_size, **kwargs)


def train_dense(model_params: Dict[str, Any], train_config: TrainConfig, data_train: SyntheticVideoDataset,
                data_eval: Optional[SyntheticVideoDataset] = None, storage: Optional[Storage] = None,
                artifact_type: str = 'dense', log_path: Optional[str] = None) -> Tuple[MODEL_TYPE, bool]:
    """Trains (or loads from the cache) the dense baseline.

    The cache key is the model hyperparameters plus seed and epoch count.

    Returns
    -------
    Tuple[MODEL_TYPE, bool]
        The model and whether it came from the cache.
    """
    # Keys must match the JSON stored in the index (lists, not tuples)
    params = json.loads(json.dumps(dict(model_params, seed=train_config.seed, epochs=train_config.epochs)))
    if storage is not None:
        model = storage.load_model(artifact_type, params)
        if model is not None:
            logging.info(f'Loaded cached dense baseline for {params}')
            return model, True

    torch.manual_seed(train_config.seed)
    model = create_model(model_params)
    train_epochs(model, data_train, train_config.epochs, lr=train_config.lr, momentum=train_config.momentum,
                 batch_size=train_config.batch_size, lr_schedule=train_config.lr_schedule, seed=train_config.seed,
                 eval_data=data_eval, phase='dense', log_path=log_path)
    if storage is not None:
        storage.save_model(artifact_type, params, model)
    return model, False


def prune(model: MODEL_TYPE, prune_config: PruneConfig, data_train: SyntheticVideoDataset,
          data_eval: Optional[SyntheticVideoDataset] = None, log_path: Optional[str] = None) -> PruneResult:
    result = prune_model(model, data_train, prune_config, eval_data=data_eval, log_path=log_path)
    if data_eval is not None:
        logging.info(f'Pruned accuracy ({prune_config.algo}, {prune_config.scheme.value}): '
                     f'{evaluate_accuracy(result.model, data_eval):.4f}')
    return result


def dense_masks(model: MODEL_TYPE, g_M: int = 4, g_N: int = 4) -> List[GroupMask]:
    """All-true KGS masks; compiling them gives the dense baseline of the sparse executor."""
    return [
        GroupMask.all_true(SchemeKind.KGS, scheme_partition(w.dims, SchemeKind.KGS, g_M, g_N), i)
        for i, w in enumerate(model.conv_weights())
    ]


def compile_model(model: MODEL_TYPE, masks: Sequence[GroupMask], reorder: bool = True
                  ) -> List[CompactWeightStore]:
    """Encodes every conv layer of the model in compact weight storage (with or without HWR)."""
    stores = []
    for weights, spec, mask in zip(model.conv_weights(), model.conv_specs(), masks):
        plan = hwr_reorder(weights, mask)[0] if reorder else None
        stores.append(cws_encode(weights, mask, plan, spec))
    return stores


def compile_for_level(model: MODEL_TYPE, masks: Sequence[GroupMask], level: str, batch_size: int = 1,
                      threads: int = 1, tune_budget: int = 200, tune_repeats: int = 10, seed: int = 0
                      ) -> Tuple[List[CompiledLayer], List[Optional[Schedule]], List[pd.DataFrame]]:
    """Compiles the model at one optimisation level.

    `no_opt` runs the CSR baseline, `reorder` HWR plus CWS untiled, `schedule` adds the default schedule and `tuned`
    the tuner's winner per layer.

    Returns
    -------
    Tuple[List[CompiledLayer], List[Optional[Schedule]], List[pd.DataFrame]]
        Compiled layers, per-layer schedules and the tuner reports (empty unless tuned).
    """
    if level not in OPT_LEVELS:
        raise ValueError(f'Unknown optimisation level {level}, expected one of {OPT_LEVELS}')
    input_dims = model.layer_input_dims(batch_size)
    specs = model.conv_specs()
    if level == 'no_opt':
        layers = [csr_encode(w, mask, spec) for w, mask, spec in zip(model.conv_weights(), masks, specs)]
        schedules = [Schedule.untiled(_output_dims(layer, dims), threads) for layer, dims in zip(layers, input_dims)]
        return layers, schedules, []

    stores = compile_model(model, masks, reorder=True)
    reports = []
    schedules = []
    for store, spec, dims in zip(stores, specs, input_dims):
        out_dims = _output_dims(store, dims)
        if level == 'reorder':
            schedules.append(Schedule.untiled(out_dims, threads))
        elif level == 'schedule':
            schedules.append(default_schedule(store, out_dims, threads))
        else:
            space = TuneSpace.for_layer(store, dims, threads=(threads,), budget=tune_budget, seed=seed)
            best, report = tune(store, spec, dims, space, repeats=tune_repeats, seed=seed)
            schedules.append(best)
            reports.append(report.assign(layer=store.layer_id))
    return stores, schedules, reports


def _output_dims(layer: CompiledLayer, input_dims: Sequence[int]) -> Tuple[int, int, int]:
    return conv_output_dims(input_dims[2:], layer.kernel, layer.stride, layer.padding)


def bench_stack(layers: Sequence[CompiledLayer], schedules: Sequence[Optional[Schedule]], input_dims: Sequence[int],
                repeats: int = 10, warmup: int = BENCH_WARMUP, seed: int = 0) -> BenchResult:
    """Latency of a whole compiled conv stack (ReLU between the layers) on a random input."""
    if repeats < 1:
        raise ValueError(f'repeats must be >= 1, got {repeats}')
    rng = np.random.RandomState(seed)
    input = FeatureMap.from_numpy(rng.standard_normal(tuple(input_dims)).astype(np.float32))
    for _ in range(warmup):
        run_stack(input, layers, schedules=schedules)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        run_stack(input, layers, schedules=schedules)
        times.append(time.perf_counter() - start)
    _, stats = run_stack(input, layers, schedules=schedules, count=True)
    threads = max((s.threads for s in schedules if s is not None), default=1)
    return BenchResult(times, warmup, sum(s.multiply_accumulates for s in stats), threads)


def compiled_accuracy(layers: Sequence[CompiledLayer], schedules: Sequence[Optional[Schedule]], model: MODEL_TYPE,
                      data: SyntheticVideoDataset, batch_size: int = 64) -> float:
    """Accuracy with the conv stack executed by the sparse executor and the classifier by torch."""
    correct = 0
    for start in range(0, len(data), batch_size):
        clips = data.clips[start:start + batch_size]
        x = FeatureMap(clips.float())
        for layer, schedule in zip(layers, schedules):
            x, _ = execute(x, layer, schedule=schedule)
            x = FeatureMap(torch.relu(x.data))
        with torch.no_grad():
            logits = model.classifier(x.data.mean(dim=(2, 3, 4)).to(model.classifier.weight.dtype))
        correct += int((logits.argmax(1) == data.labels[start:start + batch_size]).sum())
    return correct / len(data)
