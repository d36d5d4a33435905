"""Input validation helpers shared by the estimator API and loaders."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .data import Dataset, FrameRecord
from .geometry import LandmarkSet


def as_dataset(X, au_list: Sequence[int], image_size) -> Dataset:
    """Accept a Dataset or a sequence of FrameRecords; validate consistency."""
    if isinstance(X, Dataset):
        _check_frames(X.frames, len(X.au_list), X.image_size)
        return X
    frames = list(X)
    if not frames:
        raise ValueError("empty input: need at least one frame")
    if not all(isinstance(f, FrameRecord) for f in frames):
        raise TypeError("X must be a Dataset or a sequence of FrameRecord objects")
    _check_frames(frames, len(au_list), tuple(image_size))
    # keep the caller's frame order so predictions align with the input rows
    return Dataset(frames, tuple(au_list), tuple(image_size), frames[0].landmarks.schema_size)


def _check_frames(frames: List[FrameRecord], num_aus: int, image_size: tuple) -> None:
    for f in frames:
        if f.image.ndim != 3:
            raise ValueError(f"frame {f.key}: image must be (channels, H, W), got {f.image.shape}")
        if f.image.shape[1:] != tuple(image_size):
            raise ValueError(f"frame {f.key}: image is {f.image.shape[1:]}, expected {image_size}")
        if f.image.min() < 0.0 or f.image.max() > 1.0:
            raise ValueError(f"frame {f.key}: pixel values must lie in [0, 1]")
        if not isinstance(f.landmarks, LandmarkSet):
            raise TypeError(f"frame {f.key}: landmarks must be a LandmarkSet")
        if f.labels is not None and len(f.labels) != num_aus:
            raise ValueError(f"frame {f.key}: {len(f.labels)} labels for {num_aus} AUs")


def check_label_matrix(y, n_rows: int, num_aus: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows, num_aus):
        raise ValueError(f"label matrix shape {y.shape} != ({n_rows}, {num_aus})")
    if ((y != 0) & (y != 1)).any():
        raise ValueError("labels must be binary 0/1")
    return y.astype(np.int8)


def check_probability_matrix(p, num_aus: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != num_aus:
        raise ValueError(f"probability matrix must be (n, {num_aus}), got {p.shape}")
    if (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return p
