import logging
from typing import Any, Dict

import numpy as np
from sacred import Experiment
import torch

from sparse3d.helper.io import Storage
from sparse3d.helper import utils
from sparse3d.pipeline import load_data, train_dense
from sparse3d.pruning import dense_layer_flops
from sparse3d.train import TrainConfig, evaluate_accuracy

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
    n_samples = 512
    test_size = 0.25

    artifact_dir = 'cache_debug'
    model_storage_type = 'dense'
    model_params = dict(
        arch='tiny3d',
    )

    train_params = dict(
        epochs=30,
        lr=5e-2,
        momentum=0.9,
        batch_size=16,
        lr_schedule='fixed'
    )

    log_path = None
    debug_level = "info"


@ex.automain
def run(seed: int, n_samples: int, test_size: float, artifact_dir: str, model_storage_type: str,
        model_params: Dict[str, Any], train_params: Dict[str, Any], log_path: str, debug_level: str):
    """
    Instantiates a sacred experiment training the dense baseline of a 3D CNN on the synthetic clips.
    Saves the model to storage (or loads it if it was trained before) and evaluates its accuracy.

    Parameters
    ----------
    seed : int
        Seed of the data generation, the initialization and the batch order.
    n_samples : int
        Number of generated clips (train and test).
    test_size : float
        Share of the clips held out for the accuracy.
    artifact_dir: str
        The path to the folder that acts as TinyDB Storage for trained models
    model_storage_type: str
        The name of the storage (TinyDB) table name the model is stored into.
    model_params : Dict[str, Any]
        The hyperparameters of the model (`arch` selects the layer stack, see `sparse3d.models.ARCHS`).
    train_params : Dict[str, Any]
        Fields of `sparse3d.train.TrainConfig` except the seed.
    log_path : str
        Optional JSON-lines file of the per-epoch records.

    Returns
    -------
    Dict[str, any]
        The test accuracy, whether the model came from the cache and the dense FLOPs per layer.
    """
    utils.set_debug_level(debug_level)

    logging.info({
        'seed': seed, 'n_samples': n_samples, 'test_size': test_size, 'artifact_dir': artifact_dir,
        'model_storage_type': model_storage_type, 'model_params': model_params, 'train_params': train_params
    })

    torch.manual_seed(seed)
    np.random.seed(seed)
    data_train, data_test = load_data(seed, n_samples, test_size)
    logging.info(f"Training set size: {len(data_train)}")
    logging.info(f"Test set size: {len(data_test)}")

    hyperparams = dict(model_params, input_dims=list(data_train.clip_dims), n_channels=data_train.clip_dims[0],
                       n_classes=data_train.n_classes)
    storage = Storage(artifact_dir, experiment=ex)
    model, cached = train_dense(hyperparams, TrainConfig(seed=seed, **train_params), data_train, data_test,
                                storage=storage, artifact_type=model_storage_type, log_path=log_path)

    logging.info("Memory Usage after training:")
    logging.info(utils.get_max_memory_bytes() / (1024 ** 3))

    test_accuracy = evaluate_accuracy(model, data_test)
    logging.info(f'Test accuracy is {test_accuracy} with seed {seed}')

    return {
        'accuracy': test_accuracy,
        'from_cache': cached,
        'layer_flops': dense_layer_flops(model)
    }
