"""Synthetic labeled datasets: Gaussian blobs in the unit hypercube."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class LabeledDataset:
    """Flattened images in [0,1]^d with integer class labels.

    Immutable after creation: the arrays are marked read-only.
    """

    images: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64, order="C")
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 2:
            raise InputError("images must be a 2-d array of flattened samples")
        if labels.shape != (images.shape[0],):
            raise InputError("labels must align with images")
        if self.num_classes < 1:
            raise InputError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError("labels must lie in [0, num_classes)")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def class_images(self, label: int) -> np.ndarray:
        """All samples carrying the given label, in stored order."""
        return self.images[self.labels == label]

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes)


def make_synthetic_dataset(num_classes: int, input_dim: int, per_class: int,
                           separation: float, seed: int) -> LabeledDataset:
    """Class-conditional Gaussian blobs around random centroids in [0,1]^d.

    Per-coordinate noise std is 1/separation; samples are clipped to [0,1].
    Samples are stored class-by-class so a per-class prefix split is stable.
    Deterministic given the seed.
    """
    if num_classes < 2:
        raise InputError("need at least 2 classes")
    if input_dim < 4:
        raise InputError("input_dim must be at least 4")
    if per_class < 1:
        raise InputError("per_class must be at least 1")
    if separation <= 0:
        raise InputError("separation must be positive")
    rng = np.random.default_rng(seed)
    centroids = rng.random((num_classes, input_dim))
    sigma = 1.0 / separation
    blocks = []
    for c in range(num_classes):
        noise = rng.standard_normal((per_class, input_dim)) * sigma
        blocks.append(np.clip(centroids[c] + noise, 0.0, 1.0))
    images = np.concatenate(blocks, axis=0)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return LabeledDataset(images, labels, num_classes)


def split_per_class(data: LabeledDataset, n_train: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic split: first n_train samples of every class vs the rest."""
    if n_train < 1:
        raise InputError("n_train must be at least 1")
    train_idx, rest_idx = [], []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size <= n_train:
            raise InputError(f"class {c} has only {idx.size} samples, cannot hold out a test split")
        train_idx.append(idx[:n_train])
        rest_idx.append(idx[n_train:])
    return data.subset(np.concatenate(train_idx)), data.subset(np.concatenate(rest_idx))
