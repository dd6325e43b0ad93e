"""Shared fixtures and independent oracles.

The oracle helpers here deliberately use plain Python loops or one-liner
numpy reductions so they stay independent of the implementations they
check.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from hebb.dataio import Dataset, write_idx
from hebb.tensorcore import RngState

# Real IDX datasets are looked up under HEBB_DATA_DIR:
#   mnist/train-images-idx3-ubyte(.gz) ... and fashion/... equivalents.
DATA_DIR = os.environ.get("HEBB_DATA_DIR")


def dataset_paths(family: str):
    """(train_images, train_labels, test_images, test_labels) or None."""
    if not DATA_DIR:
        return None
    base = Path(DATA_DIR) / family
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    paths = []
    for name in names:
        for suffix in (".gz", ""):
            p = base / (name + suffix)
            if p.exists():
                paths.append(p)
                break
        else:
            return None
    return tuple(paths)


def require_dataset(family: str):
    paths = dataset_paths(family)
    if paths is None:
        pytest.skip(
            f"real '{family}' IDX files not present under HEBB_DATA_DIR; "
            f"see README for the expected layout"
        )
    return paths


def make_blob_dataset(count: int, num_classes: int, shape=(1, 10, 10),
                      seed: int = 0, noise: float = 0.25) -> Dataset:
    """Learnable synthetic data: per-class smooth templates plus noise.

    Pixel values are clipped to [0, 1]; classes are balanced and shuffled
    deterministically.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    templates = []
    for _ in range(num_classes):
        coarse = rng.uniform(0, 1, size=(c, h // 2 + 1, w // 2 + 1))
        fine = np.kron(coarse, np.ones((1, 2, 2)))[:, :h, :w]
        templates.append(fine)
    labels = np.arange(count) % num_classes
    labels = labels[rng.permutation(count)]
    images = np.empty((count, c, h, w))
    for i, label in enumerate(labels):
        images[i] = np.clip(
            templates[label] + rng.normal(0, noise, size=(c, h, w)), 0, 1
        )
    return Dataset(images, labels, num_classes)


def write_idx_pair(tmp_path: Path, images_u8: np.ndarray, labels_u8: np.ndarray,
                   gz: bool = False):
    suffix = ".gz" if gz else ""
    images_path = tmp_path / f"images-idx3-ubyte{suffix}"
    labels_path = tmp_path / f"labels-idx1-ubyte{suffix}"
    write_idx(images_path, images_u8)
    write_idx(labels_path, labels_u8)
    return images_path, labels_path


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Classic gradient-check metric: |a-n| / max(1e-8, |a|+|n|), maxed."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((diff / scale).max())


@pytest.fixture
def rng_state():
    return RngState(1234)
