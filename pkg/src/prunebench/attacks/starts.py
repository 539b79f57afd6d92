"""Starting points for B&B: correctly classified images of another class."""

from __future__ import annotations

import numpy as np

from ..data import Dataset
from ..errors import StartingPointNotFoundError
from .oracle import GradientOracle


def sample_starting_point(oracle: GradientOracle, dataset: Dataset, y: int, seed: int = 0,
                          predictions: np.ndarray | None = None) -> np.ndarray:
    """A dataset image with label != ``y`` that the model assigns to its own label.

    Candidates are tried in a seeded random order. ``predictions`` (the model's
    labels for ``dataset``) can be passed in to avoid recomputing them.
    """
    if predictions is None:
        predictions = oracle.predict(dataset.images)
    ok = (dataset.labels != y) & (predictions == dataset.labels)
    if not ok.any():
        raise StartingPointNotFoundError(f"no correctly classified sample with label != {y}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.images[order[ok[order]][0]].copy()


def sample_starting_points(oracle: GradientOracle, dataset: Dataset, ys, seeds) -> np.ndarray:
    predictions = oracle.predict(dataset.images)
    return np.stack([sample_starting_point(oracle, dataset, int(y), int(s), predictions) for y, s in zip(ys, seeds)])
