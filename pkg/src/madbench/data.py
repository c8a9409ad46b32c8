"""Labeled image sets on disk and the bundled MNIST subset.

An image set is an ``.npz`` file with ``x`` shaped (N, C, H, W) and ``y``
shaped (N,). Integer images are scaled by 1/255; float images must already
lie in [0, 1].
"""

from pathlib import Path

import numpy as np
import torch

from madbench.errors import ConfigError, DataError


def load_images(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"image set {path} does not exist")
    try:
        with np.load(path) as f:
            x, y = f["x"], f["y"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: not an image set with arrays x and y ({exc})") from exc
    return to_tensors(x, y)


def to_tensors(x, y):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise DataError(f"images must be (N, C, H, W), got shape {x.shape}")
    if np.issubdtype(x.dtype, np.integer):
        x = x.astype(np.float32) / 255.0
    x = x.astype(np.float32)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise DataError("float images must lie in [0, 1]")
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if len(y) != len(x):
        raise DataError(f"{len(x)} images but {len(y)} labels")
    return torch.from_numpy(x), torch.from_numpy(y)


def save_images(path, x, y):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, x=np.asarray(x, dtype=np.float32), y=np.asarray(y, dtype=np.int64))
    return path


def mnist_subset(train_per_class=200, test_per_class=300, seed=0):
    """Stratified split of the 5,000 MNIST digits bundled with mlxtend (500 per class)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ConfigError("the MNIST subset needs mlxtend (pip install mlxtend)") from exc
    if train_per_class + test_per_class > 500:
        raise ConfigError("at most 500 images per class are available")
    images, labels = mnist_data()
    images = (images.reshape(-1, 1, 28, 28) / 255.0).astype(np.float32)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:train_per_class + test_per_class])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return to_tensors(images[train_idx], labels[train_idx]), to_tensors(images[test_idx], labels[test_idx])
