"""Shared test fixtures: tiny nets and a synthetic digit-image dataset."""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from curvstep import data as D


def write_digit_idx(n: int, seed: int, directory: str) -> tuple[str, str]:
    """Write an IDX image/label pair of digit-like 28x28 class templates.

    Ten smoothed random templates plus pixel noise; deterministic in the seed.
    """
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 1.0, size=(10, 32, 32))
    windows = sliding_window_view(base, (5, 5), axis=(1, 2))
    templates = windows.mean(axis=(3, 4))  # [10, 28, 28]
    templates = (templates - templates.min()) / (templates.max() - templates.min())
    labels = rng.integers(0, 10, size=n)
    images = templates[labels] + rng.normal(0.0, 0.12, size=(n, 28, 28))
    images = np.clip(images, 0.0, 1.0)
    images_path = os.path.join(directory, "digits-images.idx")
    labels_path = os.path.join(directory, "digits-labels.idx")
    D.save_idx((images * 255).astype(np.uint8), labels.astype(np.uint8), images_path, labels_path)
    return images_path, labels_path


def mnist_paths_or_synthetic(n: int, seed: int, directory: str) -> tuple[str, str]:
    """Real MNIST files when MNIST_DIR points at them, else the synthetic pair."""
    root = os.environ.get("MNIST_DIR")
    if root:
        images = os.path.join(root, "train-images-idx3-ubyte")
        labels = os.path.join(root, "train-labels-idx1-ubyte")
        if os.path.exists(images) and os.path.exists(labels):
            return images, labels
    return write_digit_idx(n, seed, directory)
