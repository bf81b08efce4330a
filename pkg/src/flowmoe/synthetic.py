"""Separable synthetic flow data for smoke tests and demos.

Gaussian blobs in the 78-dimensional encoded feature space, one blob per
class, reshaped to the model's 6x13 input.  Class means are drawn uniformly
in [0, 1]^78; in that many dimensions random means sit far apart relative to
the blob spread, so the classes are separable by construction.
"""

from __future__ import annotations

import numpy as np

from .pipeline import CLASS_NAMES, EncodedDataset
from .tensor import RngState


def make_blobs(n_samples: int, n_classes: int = 9, seed: int = 0,
               spread: float = 0.05, shape=(6, 13)) -> EncodedDataset:
    rows, cols = shape
    dim = rows * cols
    rng = RngState(seed)
    means = rng.uniform(0.0, 1.0, (n_classes, dim))
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    x = means[labels] + spread * rng.normal((n_samples, dim))
    class_names = tuple(CLASS_NAMES[:n_classes]) if n_classes <= len(CLASS_NAMES) \
        else tuple(f"class {i}" for i in range(n_classes))
    return EncodedDataset(
        x=x.reshape(n_samples, rows, cols),
        y=labels.astype(np.int64),
        class_names=class_names,
    )
