from typing import Any, Dict

from sparse3d.models.toy3d import ARCHS, ToyModel


MODEL_TYPE = ToyModel


def create_model(hyperparams: Dict[str, Any]) -> MODEL_TYPE:
    """Creates the model instance given the hyperparameters.

    Parameters
    ----------
    hyperparams : Dict[str, Any]
        Containing the hyperparameters (`arch` selects the architecture, default `tiny3d`).

    Returns
    -------
    model: MODEL_TYPE
        The created instance.
    """
    arch = hyperparams.get('arch', 'tiny3d')
    if arch not in ARCHS:
        raise ValueError(f'Unknown architecture {arch}, expected one of {list(ARCHS.keys())}')
    return ToyModel(**hyperparams)


__all__ = [ToyModel,
           create_model,
           MODEL_TYPE,
           ARCHS]
