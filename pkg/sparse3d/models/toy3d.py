import collections.abc
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
from torchtyping import TensorType, patch_typeguard
from typeguard import typechecked

from sparse3d.tensor_core import ConvSpec, WeightTensor5D, conv_output_dims

patch_typeguard()

ARCHS = {
    'tiny3d': dict(
        n_filters=[8, 16],
        strides=[(1, 1, 1), (1, 2, 2)],
    ),
    'c3d_like': dict(
        n_filters=[16, 32, 32, 64],
        strides=[(1, 1, 1), (1, 2, 2), (1, 1, 1), (2, 2, 2)],
    ),
}


class ToyModel(nn.Module):
    """Stack of `Conv3d -> ReLU` blocks followed by global average pooling and a linear classifier.

    Parameters
    ----------
    n_channels : int
        Number of input channels.
    n_classes : int
        Number of classes for prediction.
    arch : str, optional
        Name of a predefined architecture (`tiny3d` or `c3d_like`), by default 'tiny3d'.
    n_filters : Sequence[int], optional
        Overrides the filters per conv layer of the architecture, by default None.
    strides : Sequence[Tuple[int, int, int]], optional
        Overrides the strides per conv layer, by default None.
    kernel_size : Tuple[int, int, int], optional
        (K_d, K_h, K_w) of all conv layers, by default (3, 3, 3).
    padding : Tuple[int, int, int], optional
        Zero-padding of all conv layers, by default (1, 1, 1).
    input_dims : Sequence[int], optional
        (channels, depth, height, width) of a clip, by default (3, 8, 12, 12).
    bias : bool, optional
        If set to `False` the conv layers do not learn an additive bias, by default True.
    """

    def __init__(self,
                 n_channels: int = 3,
                 n_classes: int = 4,
                 arch: str = 'tiny3d',
                 n_filters: Optional[Sequence[int]] = None,
                 strides: Optional[Sequence[Tuple[int, int, int]]] = None,
                 kernel_size: Union[int, Tuple[int, int, int]] = (3, 3, 3),
                 padding: Union[int, Tuple[int, int, int]] = (1, 1, 1),
                 input_dims: Sequence[int] = (3, 8, 12, 12),
                 bias: bool = True,
                 **kwargs):
        super().__init__()
        if arch not in ARCHS:
            raise ValueError(f'Unknown architecture {arch}, expected one of {list(ARCHS.keys())}')
        self.arch = arch
        self.n_channels = n_channels
        self.n_classes = n_classes
        self.n_filters = list(n_filters if n_filters is not None else ARCHS[arch]['n_filters'])
        strides = strides if strides is not None else ARCHS[arch]['strides']
        if len(strides) < len(self.n_filters):
            strides = list(strides) + [(1, 1, 1)] * (len(self.n_filters) - len(strides))
        self.strides = [tuple(s) for s in strides[:len(self.n_filters)]]
        self.kernel_size = _triple(kernel_size)
        self.padding = _triple(padding)
        self.input_dims = tuple(input_dims)
        if len(self.n_filters) < 1:
            raise ValueError('At least one conv layer is required')
        if self.input_dims[0] != n_channels:
            raise ValueError(f'Input dims {self.input_dims} do not match n_channels={n_channels}')

        in_channels = [n_channels] + self.n_filters[:-1]
        self.convs = nn.ModuleList([
            nn.Conv3d(n_in, n_out, self.kernel_size, stride=stride, padding=self.padding, bias=bias)
            for n_in, n_out, stride in zip(in_channels, self.n_filters, self.strides)
        ])
        self.activation = nn.ReLU()
        self.classifier = nn.Linear(self.n_filters[-1], n_classes)

    @typechecked
    def forward(self, x: TensorType["batch", "channels", "depth", "height", "width"]
                ) -> TensorType["batch", "n_classes"]:
        if x.shape[1] != self.n_channels:
            raise ValueError(f'Expected {self.n_channels} input channels, got clip of shape {tuple(x.shape)}')
        for conv in self.convs:
            x = self.activation(conv(x))
        return self.classifier(x.mean(dim=(2, 3, 4)))

    @property
    def n_layers(self) -> int:
        return len(self.convs)

    def conv_weights(self) -> List[WeightTensor5D]:
        """Views on the conv weights (no copy; masking the returned data masks the model)."""
        return [WeightTensor5D(conv.weight.data, layer_id=i) for i, conv in enumerate(self.convs)]

    def conv_specs(self) -> List[ConvSpec]:
        return [
            ConvSpec(conv.stride, conv.padding, None if conv.bias is None else conv.bias.detach().clone())
            for conv in self.convs
        ]

    def layer_input_dims(self, batch_size: int = 1) -> List[Tuple[int, int, int, int, int]]:
        """(batch, N, D, H, W) of the input of every conv layer."""
        dims = []
        spatial = tuple(self.input_dims[1:])
        channels = self.n_channels
        for conv in self.convs:
            dims.append((batch_size, channels) + spatial)
            spatial = conv_output_dims(spatial, conv.kernel_size, conv.stride, conv.padding)
            channels = conv.out_channels
        return dims

    def hyperparams(self) -> dict:
        return dict(arch=self.arch, n_channels=self.n_channels, n_classes=self.n_classes,
                    n_filters=list(self.n_filters), strides=[list(s) for s in self.strides],
                    kernel_size=list(self.kernel_size), padding=list(self.padding),
                    input_dims=list(self.input_dims), bias=self.convs[0].bias is not None)


def _triple(value: Union[int, Sequence[int]]) -> Tuple[int, int, int]:
    if not isinstance(value, collections.abc.Sequence):
        return (value, value, value)
    return tuple(value)
