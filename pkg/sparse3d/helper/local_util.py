"""Reading of seml-style experiment configs (`seml`, `slurm`, `fixed`, `grid` and named sub-configs) for running them
locally without seml.
"""
import ast
import itertools
import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import yaml

VALID_CONFIG_VALUES = ['executable', 'name', 'output_dir', 'conda_environment', 'project_root_dir']
RESERVED_KEYS = ['grid', 'fixed']


class InputError(SystemExit):
    """Parent class for input errors that don't print a stack trace."""
    pass


class ConfigError(InputError):
    """Raised when the something is wrong in the config"""

    def __init__(self, message: str = 'The config file contains an error.'):
        super().__init__(f'CONFIG ERROR: {message}')


def _convert_value(value: str) -> Any:
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        return value


def convert_values(value: Any) -> Any:
    """Parses strings such as `None`, `1e-2` or `[1, 2]` as python literals (yaml leaves them strings)."""
    if isinstance(value, dict):
        return {key: convert_values(inner) for key, inner in value.items()}
    if isinstance(value, list):
        return [convert_values(inner) for inner in value]
    if isinstance(value, str):
        return _convert_value(value)
    return value


def flatten(dictionary: Dict[str, Any], parent_key: str = '', sep: str = '.') -> Dict[str, Any]:
    """{'a': {'b': 2}, 'c': 3} becomes {'a.b': 2, 'c': 3}."""
    items = []
    for key, value in dictionary.items():
        new_key = f'{parent_key}{sep}{key}' if parent_key else key
        if isinstance(value, dict) and value:
            items.extend(flatten(value, new_key, sep=sep).items())
        else:
            items.append((new_key, value))
    return dict(items)


def unflatten(dictionary: Dict[str, Any], sep: str = '.') -> Dict[str, Any]:
    """{'a.b': 2, 'c': 3} becomes {'a': {'b': 2}, 'c': 3}."""
    result: Dict[str, Any] = {}
    for key, value in dictionary.items():
        *parents, leaf = key.split(sep)
        node = result
        for parent in parents:
            node = node.setdefault(parent, {})
            if not isinstance(node, dict):
                raise ConfigError(f'Parameter {key} conflicts with a parameter of the same prefix')
        node[leaf] = value
    return result


def read_config(config_path: str) -> Tuple[Dict[str, Any], Optional[Dict[str, Any]], Dict[str, Any]]:
    """Returns the `seml` block (with the executable resolved to an absolute path), the optional `slurm` block and
    the experiment config."""
    with open(config_path, 'r') as conf:
        config_dict = convert_values(yaml.safe_load(conf))

    if 'seml' not in config_dict:
        raise ConfigError("Please specify a 'seml' dictionary.")
    seml_dict = config_dict.pop('seml')
    for key in seml_dict.keys():
        if key not in VALID_CONFIG_VALUES:
            raise ConfigError(f'{key} is not a valid value in the `seml` config block.')
    if 'executable' not in seml_dict:
        raise ConfigError('Please specify an executable path for the experiment.')

    config_dir = Path(config_path).expanduser().resolve().parent
    root_dir = (config_dir / seml_dict['project_root_dir']).resolve() if 'project_root_dir' in seml_dict else config_dir
    candidates = [root_dir / seml_dict['executable'], config_dir / seml_dict['executable']]
    executable = next((c for c in candidates if c.exists()), None)
    if executable is None:
        raise ConfigError(f'Could not find the executable {seml_dict["executable"]}.')
    seml_dict['executable'] = str(executable)
    seml_dict['working_dir'] = str(root_dir)

    slurm_dict = config_dict.pop('slurm', None)
    return seml_dict, slurm_dict, config_dict


def generate_grid(parameter: Dict[str, Any], parent_key: str = '') -> List[Tuple[str, List[Any]]]:
    """Values of one grid parameter of type `choice`, `range` (np.arange), `uniform` (np.linspace) or `loguniform`
    (np.logspace)."""
    if 'type' not in parameter:
        raise ConfigError(f'No type found in parameter {parameter}')

    param_type = parameter['type']
    if param_type == 'choice':
        values = list(parameter['options'])
    elif param_type == 'range':
        values = list(np.arange(parameter['min'], parameter['max'], int(parameter['step'])))
    elif param_type == 'uniform':
        values = list(np.linspace(parameter['min'], parameter['max'], int(parameter['num']), endpoint=True))
    elif param_type == 'loguniform':
        values = list(np.logspace(np.log10(parameter['min']), np.log10(parameter['max']), int(parameter['num']),
                                  endpoint=True))
    elif param_type == 'parameter_collection':
        return [item for key, value in parameter['params'].items()
                for item in generate_grid(value, parent_key=f'{parent_key}.{key}')]
    else:
        raise ConfigError(f'Parameter {param_type} not implemented.')
    return [(parent_key, values)]


def cartesian_product_dict(input_dict: Dict[str, List[Any]]) -> Iterator[Dict[str, Any]]:
    keys = input_dict.keys()
    for instance in itertools.product(*input_dict.values()):
        yield dict(zip(keys, instance))


def _split_level(config: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    reserved = {key: config.get(key, {}) or {} for key in RESERVED_KEYS}
    children = {key: value for key, value in config.items() if key not in RESERVED_KEYS and isinstance(value, dict)}
    return reserved, children


def _grid_parameters(grid: Dict[str, Any], parent_key: str = '') -> Dict[str, Dict[str, Any]]:
    """Flattens nested grid blocks down to the parameter definitions (dicts with a `type`)."""
    parameters = {}
    for key, value in grid.items():
        new_key = f'{parent_key}.{key}' if parent_key else key
        if not isinstance(value, dict):
            raise ConfigError(f'Grid parameter {new_key} must be a dict with a `type`')
        if 'type' in value:
            parameters[new_key] = value
        else:
            parameters.update(_grid_parameters(value, new_key))
    return parameters


def _leaf_levels(config: Dict[str, Any], above: Dict[str, Dict[str, Any]], name: str = ''
                 ) -> List[Tuple[str, Dict[str, Dict[str, Any]]]]:
    reserved, children = _split_level(config)
    if name and not any(reserved.values()):
        raise ConfigError(f'No parameters defined under grid or fixed in sub-config {name}.')
    fixed, grid = flatten(reserved['fixed']), _grid_parameters(reserved['grid'])
    duplicates = set(fixed).intersection(grid)
    if duplicates:
        raise ConfigError(f'Found duplicate keys in {name or "the root config"}: {duplicates}')
    # Definitions in sub-configs override the more general ones
    level = dict(fixed={k: v for k, v in above['fixed'].items() if k not in grid},
                 grid={k: v for k, v in above['grid'].items() if k not in fixed})
    level['fixed'].update(fixed)
    level['grid'].update(grid)
    if not children:
        return [(name, level)]
    return [leaf for child, sub_config in children.items()
            for leaf in _leaf_levels(sub_config, level, f'{name}.{child}' if name else child)]


def generate_configs(experiment_config: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Generates the configurations of a (nested) experiment config.

    Every leaf sub-config contributes the cartesian product of its `grid` parameters, each merged with its `fixed`
    parameters (inherited from the levels above unless redefined).

    Returns
    -------
    List[Dict[str, Any]]
        The individual (unflattened) combinations of the parameters.
    """
    reserved, children = _split_level(experiment_config)
    if not any(reserved.values()) and not children:
        raise ConfigError('No parameters defined under grid or fixed in the config file.')

    all_configs = []
    for name, level in _leaf_levels(experiment_config, dict(fixed={}, grid={})):
        grids = dict(item for key, value in level['grid'].items() for item in generate_grid(value, parent_key=key))
        for grid_config in cartesian_product_dict(grids):
            all_configs.append({**level['fixed'], **grid_config})
        logging.debug(f'Sub-config {name or "root"}: {len(grids)} grid parameters')

    # Numpy scalars break the json/yaml round trips of the configs
    all_configs = [{k: v.item() if isinstance(v, np.generic) else v for k, v in config.items()}
                   for config in all_configs]
    return [unflatten(config) for config in all_configs]
