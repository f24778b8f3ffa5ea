"""The structured pruning algorithms: heuristic importance pruning, group-lasso regularization and reweighted
regularization, all sharing one prune-then-retrain pipeline.
"""
from dataclasses import asdict, dataclass
import logging
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from sparse3d.data import SyntheticVideoDataset
from sparse3d.models import MODEL_TYPE
from sparse3d.sparsity import (GroupMask, GroupNormTensor, SchemeKind, SparsityStats, apply_mask,
                               expand_to_weights, group_norm, group_norm_values, grouped_view, mask_for_target_rate,
                               mask_from_threshold, per_location_flops, scheme_partition, sparsity_stats)
from sparse3d.tensor_core import GroupPartition, WeightTensor5D, flops_count
from sparse3d.train import backward, forward, train_epochs

ALGORITHMS = ('heuristic', 'reg', 'reweighted')
THRESHOLD_POLICIES = ('target_rate', 'absolute')

WeightsLike = Union[torch.Tensor, WeightTensor5D]


@dataclass
class PruneConfig:
    """Hyperparameters of the pruning algorithms.

    `lambda_` is the penalty coefficient; `flops_weighted` multiplies each layer's regularizer by its dense FLOPs in
    units of `flops_unit`. The regularized phase trains `prune_epochs` per reweighting round with `prune_lr`; the
    retraining uses the cosine schedule starting from `retrain_lr`.
    """
    algo: str = 'reweighted'
    scheme: SchemeKind = SchemeKind.KGS
    g_M: int = 4
    g_N: int = 4
    lambda_: float = 5e-4
    norm_kind: str = 'mix'
    alpha: float = 0.5
    reweight_iterations: int = 3
    epsilon: float = 1e-6
    flops_weighted: bool = True
    flops_unit: float = 1e6
    threshold_policy: str = 'target_rate'
    target_rate: float = 2.0
    absolute_threshold_scale: float = 1e-2
    prune_epochs: int = 5
    prune_lr: float = 1e-2
    retrain_epochs: int = 20
    retrain_lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 16
    calibration_size: int = 64
    allow_dead_layers: bool = False
    seed: int = 0

    def __post_init__(self):
        self.scheme = SchemeKind(self.scheme)
        if self.algo not in ALGORITHMS:
            raise ValueError(f'Unknown pruning algorithm {self.algo}, expected one of {ALGORITHMS}')
        if self.lambda_ < 0:
            raise ValueError(f'lambda must be non-negative, got {self.lambda_}')
        if self.reweight_iterations < 1:
            raise ValueError(f'reweight_iterations must be >= 1, got {self.reweight_iterations}')
        if self.epsilon <= 0:
            raise ValueError(f'epsilon must be positive, got {self.epsilon}')
        if self.g_M < 1 or self.g_N < 1:
            raise ValueError(f'Group sizes must be >= 1, got g_M={self.g_M} and g_N={self.g_N}')
        if self.threshold_policy not in THRESHOLD_POLICIES:
            raise ValueError(f'Unknown threshold policy {self.threshold_policy}, expected one of '
                             f'{THRESHOLD_POLICIES}')
        if self.target_rate < 1:
            raise ValueError(f'The target rate must be >= 1, got {self.target_rate}')

    @staticmethod
    def from_dict(params: Dict[str, Any]) -> 'PruneConfig':
        params = dict(params)
        if 'lambda' in params:
            params['lambda_'] = params.pop('lambda')
        return PruneConfig(**params)

    def to_dict(self) -> Dict[str, Any]:
        params = asdict(self)
        params['scheme'] = self.scheme.value
        params['lambda'] = params.pop('lambda_')
        return params


@dataclass
class PenaltyState:
    """Per-location penalty coefficients (one tensor per layer, shaped like the layer's group norms)."""
    penalties: List[torch.Tensor]
    epsilon: float = 1e-6
    iteration: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f'epsilon must be positive, got {self.epsilon}')
        assert all(bool((p > 0).all()) for p in self.penalties), 'Penalties must be positive'

    @staticmethod
    def ones(shapes: Sequence[Sequence[int]], epsilon: float = 1e-6, dtype: torch.dtype = torch.float64
             ) -> 'PenaltyState':
        return PenaltyState([torch.ones(tuple(shape), dtype=dtype) for shape in shapes], epsilon, 0)


class PruneResult(NamedTuple):
    masks: List[GroupMask]
    model: MODEL_TYPE
    log: List[Dict[str, Any]]


def _raw(weights: WeightsLike) -> torch.Tensor:
    return weights.data if isinstance(weights, WeightTensor5D) else weights


def layer_partitions(weights: Sequence[WeightsLike], config: PruneConfig) -> List[GroupPartition]:
    partitions = []
    for w in weights:
        M, N, K_d, K_h, K_w = _raw(w).shape
        partitions.append(scheme_partition((M, N, K_h, K_w, K_d), config.scheme, config.g_M, config.g_N))
    return partitions


def _layer_factors(n_layers: int, config: PruneConfig, layer_flops: Optional[Sequence[float]]) -> List[float]:
    if not config.flops_weighted:
        return [1.] * n_layers
    if layer_flops is None or len(layer_flops) != n_layers:
        raise ValueError('FLOPs weighting requires the dense FLOPs of every layer')
    return [flops / config.flops_unit for flops in layer_flops]


def _l1_share(config: PruneConfig) -> float:
    return {'l1': 1., 'l2': 0., 'mix': config.alpha}[config.norm_kind]


def regularizer_value(weights: Sequence[WeightsLike], config: PruneConfig, penalties: Optional[PenaltyState] = None,
                      layer_flops: Optional[Sequence[float]] = None) -> float:
    """`lambda * sum_l c_l * sum(P_l * ||W_l^G||_g)` over the groups (and locations) of the scheme.

    Parameters
    ----------
    weights : Sequence[WeightsLike]
        Per layer conv weights.
    config : PruneConfig
        Scheme, group sizes, norm and lambda.
    penalties : PenaltyState, optional
        Per-location penalties, by default all 1.
    layer_flops : Sequence[float], optional
        Dense FLOPs per layer (required for `flops_weighted`), by default None.

    Returns
    -------
    float
        The regularizer value.
    """
    factors = _layer_factors(len(weights), config, layer_flops)
    total = 0.
    with torch.no_grad():
        for i, (w, part) in enumerate(zip(weights, layer_partitions(weights, config))):
            norms = group_norm_values(_raw(w).double(), part, config.scheme, config.norm_kind, config.alpha)
            if penalties is not None:
                norms = penalties.penalties[i].to(norms) * norms
            total += factors[i] * norms.sum().item()
    return config.lambda_ * total


def _l2_norms(w: torch.Tensor, part: GroupPartition, scheme: SchemeKind) -> torch.Tensor:
    return group_norm_values(w, part, scheme, 'l2')


def regularizer_subgradient(weights: Sequence[WeightsLike], config: PruneConfig,
                            penalties: Optional[PenaltyState] = None,
                            layer_flops: Optional[Sequence[float]] = None) -> List[torch.Tensor]:
    """Per-weight subgradient of `regularizer_value`.

    A member weight `w` of a location with l2 norm `r` contributes
    `lambda * c_l * pen * ((1 - a) * w / r + a * sign(w))`
    where `a` is the l1 share of the norm; at `r = 0` the subgradient is 0.
    """
    factors = _layer_factors(len(weights), config, layer_flops)
    a = _l1_share(config)
    grads = []
    with torch.no_grad():
        for i, (w, part) in enumerate(zip(weights, layer_partitions(weights, config))):
            w = _raw(w)
            r = _l2_norms(w, part, config.scheme)
            scale = torch.full_like(r, config.lambda_ * factors[i])
            if penalties is not None:
                scale = scale * penalties.penalties[i].to(r)
            inv_r = torch.where(r > 0, 1 / r.clamp_min(torch.finfo(r.dtype).tiny), torch.zeros_like(r))
            r_full = expand_to_weights(r, config.scheme, part)
            grad = expand_to_weights(scale, config.scheme, part) * (
                (1 - a) * w * expand_to_weights(inv_r, config.scheme, part) + a * torch.sign(w))
            grads.append(torch.where(r_full > 0, grad, torch.zeros_like(grad)))
    return grads


def reweight_update(state: PenaltyState, weights: Sequence[WeightsLike], config: PruneConfig) -> PenaltyState:
    """Sets every penalty to `1 / (||W^G(:, :, d, h, w)||_g^2 + epsilon)` and advances the iteration counter."""
    penalties = []
    with torch.no_grad():
        for w, part in zip(weights, layer_partitions(weights, config)):
            norms = group_norm_values(_raw(w).double(), part, config.scheme, config.norm_kind, config.alpha)
            penalties.append(1 / (norms.pow(2) + state.epsilon))
    return PenaltyState(penalties, state.epsilon, state.iteration + 1)


def dense_layer_flops(model: MODEL_TYPE) -> List[int]:
    return [
        flops_count(w, spec, dims)
        for w, spec, dims in zip(model.conv_weights(), model.conv_specs(), model.layer_input_dims())
    ]


def model_stats(model: MODEL_TYPE, masks: Optional[Sequence[GroupMask]] = None) -> SparsityStats:
    items = model.conv_weights() if masks is None else masks
    return sparsity_stats(items, model.conv_specs(), model.layer_input_dims())


def select_masks(model: MODEL_TYPE, config: PruneConfig) -> List[GroupMask]:
    """Turns the (regularized) weights into masks following the threshold policy of the config."""
    weights = model.conv_weights()
    partitions = layer_partitions(weights, config)
    norms = [group_norm(w, part, config.scheme, config.norm_kind, config.alpha)
             for w, part in zip(weights, partitions)]
    if config.threshold_policy == 'absolute':
        masks = []
        for norm in norms:
            rms = norm.values.pow(2).mean().sqrt().item()
            masks.append(mask_from_threshold(norm, config.absolute_threshold_scale * rms, config.allow_dead_layers))
        return masks
    loc_flops = [per_location_flops(part, config.scheme, spec, dims)
                 for part, spec, dims in zip(partitions, model.conv_specs(), model.layer_input_dims())]
    return mask_for_target_rate(norms, loc_flops, config.target_rate, config.allow_dead_layers)


def apply_masks_to_model(model: MODEL_TYPE, masks: Sequence[GroupMask]):
    with torch.no_grad():
        for conv, w, mask in zip(model.convs, model.conv_weights(), masks):
            conv.weight.copy_(apply_mask(w, mask).data)


def _retrain(model: MODEL_TYPE, data: SyntheticVideoDataset, masks: List[GroupMask], config: PruneConfig,
             eval_data: Optional[SyntheticVideoDataset], log_path: Optional[str]) -> List[Dict[str, Any]]:
    apply_masks_to_model(model, masks)
    stats = model_stats(model, masks)
    logging.info(f'Pruned to param_rate {stats.param_rate:.3f} and flops_rate {stats.flops_rate:.3f}; retraining '
                 f'for {config.retrain_epochs} epochs')
    _, log = train_epochs(model, data, config.retrain_epochs, lr=config.retrain_lr, momentum=config.momentum,
                          batch_size=config.batch_size, masks=masks, lr_schedule='cosine', seed=config.seed + 1,
                          eval_data=eval_data, phase='retrain', log_path=log_path)
    return log


def _prune_with_regularizer(model: MODEL_TYPE, data: SyntheticVideoDataset, config: PruneConfig, reweighted: bool,
                            eval_data: Optional[SyntheticVideoDataset] = None,
                            log_path: Optional[str] = None) -> PruneResult:
    torch.manual_seed(config.seed)
    layer_flops = dense_layer_flops(model) if config.flops_weighted else None
    partitions = layer_partitions(model.conv_weights(), config)
    shapes = [group_norm_values(w.data, part, config.scheme).shape
              for w, part in zip(model.conv_weights(), partitions)]
    state = PenaltyState.ones(shapes, config.epsilon)

    # Plain group lasso spends the same epoch budget in one round with fixed penalties
    rounds = config.reweight_iterations if reweighted else 1
    epochs = config.prune_epochs if reweighted else config.prune_epochs * config.reweight_iterations

    log = []
    for t in range(rounds):
        def reg_hook(conv_weights: List[torch.Tensor]):
            return (regularizer_value(conv_weights, config, state, layer_flops),
                    [g.to(w.dtype) for g, w in zip(
                        regularizer_subgradient(conv_weights, config, state, layer_flops), conv_weights)])

        _, round_log = train_epochs(model, data, epochs, lr=config.prune_lr, momentum=config.momentum,
                                    batch_size=config.batch_size, reg_hook=reg_hook, seed=config.seed + 2 + t,
                                    eval_data=eval_data, phase=f'prune_{t}', log_path=log_path)
        log.extend(round_log)
        if reweighted:
            state = reweight_update(state, model.conv_weights(), config)
            logging.info(f'Reweighting round {t}: penalties in [{min(p.min().item() for p in state.penalties):.3e}, '
                         f'{max(p.max().item() for p in state.penalties):.3e}]')

    masks = select_masks(model, config)
    log.extend(_retrain(model, data, masks, config, eval_data, log_path))
    return PruneResult(masks, model, log)


def reweighted_prune(model: MODEL_TYPE, data: SyntheticVideoDataset, config: PruneConfig,
                     eval_data: Optional[SyntheticVideoDataset] = None, log_path: Optional[str] = None
                     ) -> PruneResult:
    """Reweighted group-lasso pruning.

    Starting from penalties 1, every round trains with the penalty-weighted regularizer and then resets each
    penalty to `1 / (norm^2 + epsilon)`. Afterwards the (near) zero locations are pruned and the kept weights are
    retrained with the mask enforced.

    Parameters
    ----------
    model : MODEL_TYPE
        Trained dense model (pruned in place).
    data : SyntheticVideoDataset
        Training clips.
    config : PruneConfig
        Hyperparameters (`reweight_iterations` in [1, 8]).
    eval_data : SyntheticVideoDataset, optional
        Held-out clips for the accuracies in the log, by default None.
    log_path : str, optional
        JSON-lines training log, by default None.

    Returns
    -------
    PruneResult
        Masks, pruned model and training log.
    """
    if not 1 <= config.reweight_iterations <= 8:
        raise ValueError(f'reweight_iterations must lie in [1, 8], got {config.reweight_iterations}')
    return _prune_with_regularizer(model, data, config, True, eval_data, log_path)


def regularization_prune(model: MODEL_TYPE, data: SyntheticVideoDataset, config: PruneConfig,
                         eval_data: Optional[SyntheticVideoDataset] = None, log_path: Optional[str] = None
                         ) -> PruneResult:
    """Group-lasso pruning with all penalties fixed at 1."""
    return _prune_with_regularizer(model, data, config, False, eval_data, log_path)


def taylor_importance(model: MODEL_TYPE, calibration: SyntheticVideoDataset, layer: int,
                      partition: GroupPartition, scheme: SchemeKind) -> torch.Tensor:
    """First-order Taylor importance `|sum w * dL/dw|` of every location of a layer on a calibration batch."""
    _, cache = forward(model, calibration.clips)
    grads = backward(model, cache, calibration.labels)
    w = model.convs[layer].weight.detach()
    contribution = w * grads[f'convs.{layer}.weight']
    if scheme == SchemeKind.FILTER:
        return contribution.reshape(w.shape[0], -1).sum(-1).abs()
    grouped = grouped_view(contribution, partition)
    dims = (1, 3) if scheme == SchemeKind.KGS else (1, 3, 4, 5, 6)
    return grouped.sum(dims).abs()


def heuristic_prune(model: MODEL_TYPE, data: SyntheticVideoDataset, config: PruneConfig,
                    eval_data: Optional[SyntheticVideoDataset] = None, log_path: Optional[str] = None,
                    calibration: Optional[SyntheticVideoDataset] = None) -> PruneResult:
    """Importance-score pruning from the last to the first layer followed by one retraining.

    Each layer is pruned to the target FLOPs rate by the Taylor importance of its locations; importances are
    recomputed after each layer is pruned, so they reflect the already pruned layers behind it.
    """
    torch.manual_seed(config.seed)
    if calibration is None:
        calibration = data.subset(np.arange(min(config.calibration_size, len(data))))
    weights = model.conv_weights()
    partitions = layer_partitions(weights, config)
    specs, dims = model.conv_specs(), model.layer_input_dims()

    masks: List[Optional[GroupMask]] = [None] * model.n_layers
    for layer in reversed(range(model.n_layers)):
        importance = taylor_importance(model, calibration, layer, partitions[layer], config.scheme)
        norms = GroupNormTensor(importance.detach().double(), config.scheme, partitions[layer], 'taylor',
                                layer_id=layer)
        loc_flops = per_location_flops(partitions[layer], config.scheme, specs[layer], dims[layer])
        masks[layer] = mask_for_target_rate(norms, loc_flops, config.target_rate, config.allow_dead_layers)
        with torch.no_grad():
            conv = model.convs[layer]
            conv.weight.copy_(apply_mask(WeightTensor5D(conv.weight.data, layer), masks[layer]).data)
        logging.debug(f'Layer {layer}: kept {masks[layer].kept_fraction:.3f} of the locations')

    log = _retrain(model, data, masks, config, eval_data, log_path)
    return PruneResult(masks, model, log)


PRUNE_ALGORITHMS = {
    'heuristic': heuristic_prune,
    'reg': regularization_prune,
    'reweighted': reweighted_prune,
}


def prune_model(model: MODEL_TYPE, data: SyntheticVideoDataset, config: PruneConfig,
                eval_data: Optional[SyntheticVideoDataset] = None, log_path: Optional[str] = None) -> PruneResult:
    """Runs the pruning algorithm named by `config.algo`."""
    if config.algo not in PRUNE_ALGORITHMS:
        raise ValueError(f'Unknown pruning algorithm {config.algo}')
    return PRUNE_ALGORITHMS[config.algo](model, data, config, eval_data=eval_data, log_path=log_path)
