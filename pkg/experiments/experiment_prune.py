import json
import logging
from typing import Any, Dict

from sacred import Experiment

from sparse3d.experiment import ExperimentConfig, report_speedup, run_cell
from sparse3d.helper import utils

try:
    import seml
except:  # noqa: E722
    seml = None


ex = Experiment()

if seml is not None:
    seml.setup_logger(ex)


@ex.config
def config():
    overwrite = None

    if seml is not None:
        db_collection = None
        if db_collection is not None:
            ex.observers.append(seml.create_mongodb_observer(db_collection, overwrite=overwrite))

    # default params
    seed = 0
    algo = 'reweighted'
    scheme = 'kgs'
    target_rate = 2.0

    n_samples = 512
    model_params = dict(
        arch='tiny3d',
    )
    train_params = dict(
        epochs=30,
        lr=5e-2,
        batch_size=16
    )
    prune_params = dict(
        g_M=4,
        g_N=4,
        prune_epochs=5,
        retrain_epochs=20
    )
    compile_params = dict(
        opt_level='tuned',
        ablation=False,
        threads=1,
        bench_batch_size=1,
        bench_repeats=10,
        tune_budget=50,
        tune_repeats=5
    )

    artifact_dir = 'cache_debug'
    output_dir = 'output/prune'
    debug_level = "info"


@ex.automain
def run(seed: int, algo: str, scheme: str, target_rate: float, n_samples: int, model_params: Dict[str, Any],
        train_params: Dict[str, Any], prune_params: Dict[str, Any], compile_params: Dict[str, Any],
        artifact_dir: str, output_dir: str, debug_level: str):
    """
    Instantiates a sacred experiment for one cell of the pruning matrix: the dense baseline comes from the storage
    (it is trained if missing), is pruned, compiled and benchmarked against its dense compilation.

    Parameters
    ----------
    seed : int
        Seed of data, training, pruning and tuning.
    algo : str
        One of `reweighted`, `reg` or `heuristic`.
    scheme : str
        One of `kgs`, `vanilla` or `filter`.
    target_rate : float
        Requested FLOPs reduction (dense over pruned FLOPs).
    model_params : Dict[str, Any]
        Model hyperparameters; `arch` selects the layer stack.
    train_params : Dict[str, Any]
        `epochs`, `lr` and `batch_size` of the dense baseline.
    prune_params : Dict[str, Any]
        Overrides of `sparse3d.pruning.PruneConfig`.
    compile_params : Dict[str, Any]
        Optimisation level, threads and benchmark/tuning budgets.
    artifact_dir: str
        The path to the folder that acts as TinyDB Storage for the dense baselines.
    output_dir: str
        Where the per-epoch logs are written.

    Returns
    -------
    Dict[str, any]
        Accuracy, FLOPs/parameter rates, latencies and speedup of the cell (and the ablation rows if requested).
    """
    utils.set_debug_level(debug_level)

    logging.info({
        'seed': seed, 'algo': algo, 'scheme': scheme, 'target_rate': target_rate, 'n_samples': n_samples,
        'model_params': model_params, 'train_params': train_params, 'prune_params': prune_params,
        'compile_params': compile_params, 'artifact_dir': artifact_dir, 'output_dir': output_dir
    })

    model_params = dict(model_params)
    config = ExperimentConfig(
        seeds=[seed], algorithms=[algo], schemes=[scheme], target_rates=[target_rate],
        arch=model_params.pop('arch', 'tiny3d'), model_params=model_params, n_samples=n_samples,
        train_epochs=train_params.get('epochs', 30), train_lr=train_params.get('lr', 5e-2),
        batch_size=train_params.get('batch_size', 16), prune=dict(prune_params), output_dir=output_dir,
        cache_dir=artifact_dir, **compile_params
    )
    row, ablation = run_cell(config, seed, algo, scheme, target_rate)
    if row['status'] != 'ok':
        raise RuntimeError(f'Cell failed: {row["error"]}')

    result = json.loads(report_speedup([row]).to_json(orient='records'))[0]
    logging.info(f'Accuracy {result["accuracy"]:.4f} (dense {result["dense_accuracy"]:.4f}) at FLOPs rate '
                 f'{result["flops_rate"]:.3f} with speedup {result["speedup"]:.3f}')
    return dict(result, ablation=ablation)
