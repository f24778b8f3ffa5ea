"""Synthetic video clips: a Gaussian blob drifting across the frames in one of several directions.

The direction of the drift is the class label, hence the depth (frame) axis carries the information and temporal
kernels (`K_d > 1`) are required to solve the task.
"""
from dataclasses import dataclass
import logging
from typing import Optional, Tuple

import numpy as np
from sklearn.model_selection import train_test_split
import torch
from torchtyping import TensorType, patch_typeguard
from typeguard import typechecked

patch_typeguard()

# (dh, dw) drift per frame of the classes; more than four classes reuse the diagonals
DIRECTIONS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SyntheticVideoDataset:
    """Clips of shape [n_samples, channels, depth, height, width] with their class labels.

    The dataset is never stored; it is regenerated from `seed`.
    """
    clips: torch.Tensor
    labels: torch.Tensor
    seed: int
    n_classes: int

    def __post_init__(self):
        if self.clips.dim() != 5:
            raise ValueError(f'Clips must have 5 dims (samples, C, D, H, W), got {tuple(self.clips.shape)}')
        if self.clips.shape[0] != self.labels.shape[0]:
            raise ValueError(f'Got {self.clips.shape[0]} clips but {self.labels.shape[0]} labels')
        assert int(self.labels.max()) < self.n_classes, 'Labels must be smaller than the class count'

    def __len__(self) -> int:
        return self.clips.shape[0]

    @property
    def clip_dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.clips.shape[1:])

    def subset(self, idx: np.ndarray) -> 'SyntheticVideoDataset':
        idx = torch.as_tensor(idx, dtype=torch.long)
        return SyntheticVideoDataset(self.clips[idx], self.labels[idx], self.seed, self.n_classes)

    def to(self, dtype: torch.dtype) -> 'SyntheticVideoDataset':
        return SyntheticVideoDataset(self.clips.to(dtype), self.labels, self.seed, self.n_classes)

    @staticmethod
    def generate(n_samples: int, seed: int, n_classes: int = 4, channels: int = 3, depth: int = 8,
                 height: int = 12, width: int = 12, sigma: float = 1.5, noise: float = 0.05,
                 dtype: torch.dtype = torch.float32) -> 'SyntheticVideoDataset':
        """Generates balanced clips of drifting blobs.

        Parameters
        ----------
        n_samples : int
            Number of clips.
        seed : int
            Seed of the generator (identical seeds give identical clips).
        n_classes : int, optional
            Number of drift directions, by default 4 (at most 8).
        channels, depth, height, width : int, optional
            Clip dims, by default 3 x 8 x 12 x 12.
        sigma : float, optional
            Blob width in pixels, by default 1.5.
        noise : float, optional
            Standard deviation of the additive Gaussian noise, by default 0.05.
        dtype : torch.dtype, optional
            Type of the clips, by default torch.float32.

        Returns
        -------
        SyntheticVideoDataset
            The clips and labels.
        """
        if not 1 <= n_classes <= len(DIRECTIONS):
            raise ValueError(f'The number of classes must lie in [1, {len(DIRECTIONS)}], got {n_classes}')
        if n_samples < n_classes:
            raise ValueError(f'At least one sample per class is required, got {n_samples} for {n_classes} classes')
        rng = np.random.RandomState(seed)

        labels = np.arange(n_samples) % n_classes
        rng.shuffle(labels)
        direction = DIRECTIONS[labels]
        speed = rng.uniform(0.7, 1.3, size=(n_samples, 1))
        # Start such that the blob crosses the frame center halfway through the clip
        center = np.array([(height - 1) / 2, (width - 1) / 2])
        start = center - direction * speed * (depth - 1) / 2 + rng.uniform(-1, 1, size=(n_samples, 2))

        t = np.arange(depth)
        pos = start[:, None, :] + direction[:, None, :] * speed[:, None, :] * t[None, :, None]
        hh, ww = np.arange(height), np.arange(width)
        blob = np.exp(-((hh[None, None, :, None] - pos[:, :, None, None, 0]) ** 2
                        + (ww[None, None, None, :] - pos[:, :, None, None, 1]) ** 2) / (2 * sigma ** 2))
        intensity = rng.uniform(0.5, 1.5, size=(n_samples, channels))
        clips = intensity[:, :, None, None, None] * blob[:, None]
        clips = clips + noise * rng.randn(*clips.shape)

        logging.debug(f'Generated {n_samples} synthetic clips of shape {clips.shape[1:]} with seed {seed}')
        return SyntheticVideoDataset(torch.from_numpy(clips).to(dtype), torch.from_numpy(labels).long(), seed,
                                     n_classes)

    def split(self, test_size: float = 0.25) -> Tuple['SyntheticVideoDataset', 'SyntheticVideoDataset']:
        """Stratified split into a training and a held-out part (seeded by the dataset seed)."""
        idx = np.arange(len(self))
        idx_train, idx_test = train_test_split(idx, random_state=self.seed, test_size=test_size,
                                               stratify=self.labels.numpy())
        return self.subset(idx_train), self.subset(idx_test)


@typechecked
def iterate_batches(clips: TensorType["n_samples", "channels", "depth", "height", "width"],
                    labels: TensorType["n_samples"], batch_size: int, generator: Optional[torch.Generator] = None,
                    shuffle: bool = True):
    """Yields (clips, labels) batches in a (seeded) random order."""
    n = clips.shape[0]
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield clips[idx], labels[idx]


def prep_dataset(n_samples: int = 512, seed: int = 0, test_size: float = 0.25, dtype: torch.dtype = torch.float32,
                 **kwargs) -> Tuple[SyntheticVideoDataset, SyntheticVideoDataset]:
    """Generates and splits the synthetic dataset in one go."""
    return SyntheticVideoDataset.generate(n_samples, seed, dtype=dtype, **kwargs).split(test_size)
