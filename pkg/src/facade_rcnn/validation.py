"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .synth import IGNORE_INDEX, LabeledSample

STRIDE = 8


def check_images(images, dtype=np.float64) -> np.ndarray:
    """Return images as a float array [N, 3, H, W] with H, W multiples of 8.

    A single [3, H, W] image is promoted to a batch of one.
    """
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected images of shape [N, 3, H, W], got {arr.shape}")
    h, w = arr.shape[2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}x{w} must be a multiple of {STRIDE} in both dimensions")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or Inf")
    return arr


def check_samples(samples, n_classes: int, require_labels: bool = True) -> list:
    """Validate a non-empty sequence of :class:`LabeledSample`."""
    if isinstance(samples, LabeledSample):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, LabeledSample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected LabeledSample")
        check_images(s.image)
        if s.image.shape[1:] != s.semantic.shape:
            raise ValueError(f"sample {s.sample_id or i}: image {s.image.shape[1:]} and "
                             f"labels {s.semantic.shape} differ in extent")
        if require_labels:
            lab = s.semantic[s.semantic != IGNORE_INDEX]
            if lab.size and lab.max() >= n_classes:
                raise ValueError(f"sample {s.sample_id or i}: label {int(lab.max())} "
                                 f"outside [0, {n_classes})")
    return samples


def check_threshold(value, name: str = "threshold") -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must be a number in [0, 1], got {value!r}")
    return float(value)


def same_size_groups(samples: Sequence[LabeledSample], indices: Sequence[int]):
    """Split ``indices`` into runs of samples sharing one image size, order kept."""
    groups: dict = {}
    for i in indices:
        groups.setdefault(samples[i].semantic.shape, []).append(i)
    return list(groups.values())
