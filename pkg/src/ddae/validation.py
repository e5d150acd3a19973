"""Input validation helpers shared by the estimator wrappers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import CovariateRecord, Dataset


def check_images(images, resolution: int | None = None) -> np.ndarray:
    """Coerce to a finite (n, H, W) float32 stack of square [0, 1] images."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected images of shape (n, H, W), got {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(
            f"images must lie in [0, 1], got range [{arr.min():.4g}, {arr.max():.4g}]"
        )
    if resolution is not None and arr.shape[1] != resolution:
        raise ValueError(f"expected {resolution}x{resolution} images, got {arr.shape[1]}x{arr.shape[2]}")
    return arr


def check_records(records, vocabulary: Sequence[str] | None = None) -> list[CovariateRecord]:
    """Validate a covariate record sequence, optionally against a vocabulary."""
    out = list(records)
    for i, record in enumerate(out):
        if not isinstance(record, CovariateRecord):
            raise TypeError(f"records[{i}] is {type(record).__name__}, expected CovariateRecord")
    if vocabulary is not None:
        unknown = sorted({r.site for r in out} - set(vocabulary))
        if unknown:
            raise ValueError(f"unknown site(s) {unknown}; vocabulary is {list(vocabulary)}")
    return out


def check_dataset(X, resolution: int | None = None) -> Dataset:
    """Require a Dataset (the estimators' sample container)."""
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    check_images(X.images, resolution)
    return X
