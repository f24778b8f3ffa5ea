"""Training code: forward/backward passes, SGD with momentum, the cosine schedule and the (masked) epoch loop.
"""
from dataclasses import dataclass, field
import json
import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from tqdm.auto import tqdm

from sparse3d.data import SyntheticVideoDataset, iterate_batches
from sparse3d.helper.utils import accuracy
from sparse3d.models import MODEL_TYPE
from sparse3d.sparsity import GroupMask, sparsity_stats

RegHook = Callable[[List[torch.Tensor]], Tuple[float, List[torch.Tensor]]]


class DivergenceError(RuntimeError):
    """Raised if the loss or the gradients are not finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 5e-2
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    lr_schedule: str = 'fixed'

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f'The number of epochs must be non-negative, got {self.epochs}')
        if self.lr <= 0:
            raise ValueError(f'The learning rate must be positive, got {self.lr}')
        if self.lr_schedule not in ('fixed', 'cosine'):
            raise ValueError(f'Unknown learning rate schedule {self.lr_schedule}')


@dataclass
class ForwardCache:
    """Keeps the autograd graph of a forward pass and the parameter versions it was computed with."""
    logits: torch.Tensor
    versions: Tuple[int, ...]
    consumed: bool = field(default=False)


def _param_versions(model: MODEL_TYPE) -> Tuple[int, ...]:
    return tuple(p._version for p in model.parameters())


def forward(model: MODEL_TYPE, batch: torch.Tensor) -> Tuple[torch.Tensor, ForwardCache]:
    """Logits of a batch of clips.

    Parameters
    ----------
    model : MODEL_TYPE
        The model.
    batch : torch.Tensor
        [batch, channels, depth, height, width] clips (cast to the parameter type).

    Returns
    -------
    Tuple[torch.Tensor, ForwardCache]
        The logits and the cache required by `backward`.
    """
    if batch.dim() != 5:
        raise ValueError(f'Expected a batch of shape (batch, C, D, H, W), got {tuple(batch.shape)}')
    dtype = next(model.parameters()).dtype
    with torch.enable_grad():
        logits = model(batch.to(dtype))
    return logits.detach(), ForwardCache(logits, _param_versions(model))


def backward(model: MODEL_TYPE, cache: ForwardCache, labels: torch.Tensor,
             reduction: str = 'mean') -> Dict[str, torch.Tensor]:
    """Gradients of the softmax cross-entropy w.r.t. every parameter (without any regularizer).

    Raises
    ------
    ValueError
        If the parameters changed since the forward pass or the cache was already consumed.
    """
    if cache.consumed:
        raise ValueError('The forward cache was already consumed by a backward pass')
    if cache.versions != _param_versions(model):
        raise ValueError('Stale forward cache: the parameters changed after the forward pass')
    if labels.shape[0] != cache.logits.shape[0]:
        raise ValueError(f'Got {labels.shape[0]} labels for {cache.logits.shape[0]} logits')
    names, params = zip(*model.named_parameters())
    loss = F.cross_entropy(cache.logits, labels, reduction=reduction)
    grads = torch.autograd.grad(loss, params)
    cache.consumed = True
    return dict(zip(names, grads))


def sgd_step(params: Sequence[torch.nn.Parameter], grads: Sequence[torch.Tensor], lr: float, momentum: float = 0.0,
             optimizer: Optional[torch.optim.SGD] = None) -> torch.optim.SGD:
    """One (momentum) SGD update of `params` in place.

    Parameters
    ----------
    params : Sequence[torch.nn.Parameter]
        Parameters to update.
    grads : Sequence[torch.Tensor]
        Gradients in the same order.
    lr : float
        Learning rate (> 0).
    momentum : float, optional
        Momentum factor, by default 0.
    optimizer : torch.optim.SGD, optional
        Optimizer of the previous step carrying the momentum buffers, by default None.

    Returns
    -------
    torch.optim.SGD
        The optimizer to pass to the next step.
    """
    if lr <= 0:
        raise ValueError(f'The learning rate must be positive, got {lr}')
    params = list(params)
    for param, grad in zip(params, grads):
        if not torch.isfinite(grad).all():
            raise DivergenceError(f'Non-finite gradient for parameter of shape {tuple(param.shape)}')
        param.grad = grad.detach().clone()
    if optimizer is None:
        optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum)
    for group in optimizer.param_groups:
        group['lr'] = lr
        group['momentum'] = momentum
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return optimizer


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    if not 0 <= epoch <= total:
        raise ValueError(f'Epoch {epoch} outside of [0, {total}]')
    if total == 0:
        return lr0
    return lr0 * (1 + math.cos(math.pi * epoch / total)) / 2


def enforce_masks(model: MODEL_TYPE, weight_masks: Sequence[Optional[torch.Tensor]]):
    with torch.no_grad():
        for conv, keep in zip(model.convs, weight_masks):
            if keep is not None:
                conv.weight.masked_fill_(~keep, 0.)


@torch.no_grad()
def evaluate_accuracy(model: MODEL_TYPE, dataset: SyntheticVideoDataset, batch_size: int = 256) -> float:
    model.eval()
    dtype = next(model.parameters()).dtype
    logits = torch.cat([
        model(clips.to(dtype))
        for clips, _ in iterate_batches(dataset.clips, dataset.labels, batch_size, shuffle=False)
    ])
    model.train()
    return accuracy(logits, dataset.labels)


def current_flops_rate(model: MODEL_TYPE) -> float:
    stats = sparsity_stats(model.conv_weights(), model.conv_specs(), model.layer_input_dims())
    return stats.flops_rate


def train_epochs(model: MODEL_TYPE, data: SyntheticVideoDataset, epochs: int, lr: float = 5e-2,
                 momentum: float = 0.9, batch_size: int = 16, masks: Optional[Sequence[Optional[GroupMask]]] = None,
                 reg_hook: Optional[RegHook] = None, lr_schedule: str = 'fixed', seed: int = 0,
                 eval_data: Optional[SyntheticVideoDataset] = None, phase: str = 'train',
                 log_path: Optional[str] = None, display_step: int = 5) -> Tuple[MODEL_TYPE, List[Dict[str, Any]]]:
    """Trains the model with (momentum) SGD on the cross-entropy plus an optional regularizer.

    Parameters
    ----------
    model : MODEL_TYPE
        Model to train in place.
    data : SyntheticVideoDataset
        Training clips.
    epochs : int
        Number of epochs (0 leaves the model unchanged).
    lr : float, optional
        (Initial) learning rate, by default 5e-2.
    momentum : float, optional
        Momentum factor, by default 0.9.
    batch_size : int, optional
        Batch size, by default 16.
    masks : Sequence[Optional[GroupMask]], optional
        Per conv layer mask re-applied after every step, by default None.
    reg_hook : RegHook, optional
        Returns the regularizer value and its gradient w.r.t. the conv weights, by default None.
    lr_schedule : str, optional
        `fixed` or `cosine` (decays from `lr` towards 0), by default 'fixed'.
    seed : int, optional
        Seed of the batch order, by default 0.
    eval_data : SyntheticVideoDataset, optional
        Held-out clips for the accuracy in the log, by default the training clips.
    phase : str, optional
        Label of the records in the log, by default 'train'.
    log_path : str, optional
        If given the records are appended as JSON lines, by default None.
    display_step : int, optional
        How often to log the progress, by default 5.

    Returns
    -------
    Tuple[MODEL_TYPE, List[Dict[str, Any]]]
        The model and one record per epoch (phase, epoch, loss, regularizer, accuracy, flops_rate, lr).

    Raises
    ------
    DivergenceError
        If the loss or a gradient is not finite.
    """
    if epochs < 0:
        raise ValueError(f'The number of epochs must be non-negative, got {epochs}')
    if masks is not None and len(masks) != model.n_layers:
        raise ValueError(f'Got {len(masks)} masks for {model.n_layers} conv layers')
    weight_masks = [None if mask is None else mask.weight_mask() for mask in (masks or [])]
    if masks is not None:
        enforce_masks(model, weight_masks)

    generator = torch.Generator().manual_seed(seed)
    names = [name for name, _ in model.named_parameters()]
    params = [param for _, param in model.named_parameters()]
    conv_names = [f'convs.{i}.weight' for i in range(model.n_layers)]
    optimizer = None
    log = []

    model.train()
    for epoch in tqdm(range(epochs), desc=f'Training ({phase})...', disable=epochs == 0):
        epoch_lr = cosine_lr(epoch, epochs, lr) if lr_schedule == 'cosine' else lr
        losses, regs = [], []
        for clips, labels in iterate_batches(data.clips, data.labels, batch_size, generator):
            logits, cache = forward(model, clips)
            loss = F.cross_entropy(logits, labels).item()
            if not math.isfinite(loss):
                raise DivergenceError(f'Non-finite loss {loss} in epoch {epoch} ({phase})')
            grads = backward(model, cache, labels)
            if reg_hook is not None:
                reg_value, reg_grads = reg_hook([model.convs[i].weight for i in range(model.n_layers)])
                for name, reg_grad in zip(conv_names, reg_grads):
                    grads[name] = grads[name] + reg_grad
                regs.append(reg_value)
            optimizer = sgd_step(params, [grads[name] for name in names], epoch_lr, momentum, optimizer)
            if masks is not None:
                enforce_masks(model, weight_masks)
            losses.append(loss)

        record = dict(
            phase=phase,
            epoch=epoch,
            loss=sum(losses) / len(losses),
            regularizer=sum(regs) / len(regs) if regs else 0.,
            accuracy=evaluate_accuracy(model, eval_data if eval_data is not None else data),
            flops_rate=current_flops_rate(model),
            lr=epoch_lr,
        )
        log.append(record)
        if log_path is not None:
            with open(log_path, 'a') as f:
                f.write(json.dumps(record) + '\n')
        if epoch % display_step == 0 or epoch == epochs - 1:
            logging.info(f'Epoch {epoch:4} ({phase}): loss: {record["loss"]:.5f}, reg: {record["regularizer"]:.5f}, '
                         f'acc: {record["accuracy"]:.5f}, flops_rate: {record["flops_rate"]:.3f}, lr: {epoch_lr:.2e}')

    return model, log
