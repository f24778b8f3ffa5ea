import hashlib
import json
import logging
from typing import Any, Dict, Optional

import numpy as np
import torch

try:
    import resource
    _resource_module_available = True
except ModuleNotFoundError:
    _resource_module_available = False


LOGGING_LEVELS = {
    'info': logging.INFO,
    'debug': logging.DEBUG,
    'warning': logging.WARNING,
    'critical': logging.CRITICAL,
    'error': logging.ERROR,
}


def accuracy(logits: torch.Tensor, labels: torch.Tensor, split_idx: Optional[np.ndarray] = None) -> float:
    """Returns the accuracy for a tensor of logits, a list of labels and optional split indices.

    Parameters
    ----------
    logits : torch.Tensor
        [n x c] tensor of logits (`.argmax(1)` should return most probable class).
    labels : torch.Tensor
        [n] target labels.
    split_idx : np.ndarray, optional
        [?] array with indices for the current split, by default all.

    Returns
    -------
    float
        the Accuracy
    """
    if split_idx is None:
        return (logits.argmax(1) == labels).float().mean().item()
    return (logits.argmax(1)[split_idx] == labels[split_idx]).float().mean().item()


def set_debug_level(debug_level: Optional[str]):
    if debug_level is not None and isinstance(debug_level, str):
        level = LOGGING_LEVELS.get(debug_level.lower())
        if level is not None:
            logging.getLogger().setLevel(level)


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical (key-sorted) JSON of a config."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode('utf-8')).hexdigest()


def get_max_memory_bytes():
    if _resource_module_available:
        return 1024 * resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return np.nan
