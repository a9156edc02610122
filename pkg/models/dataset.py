from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from errors import ConfigurationError, ParameterError, ShapeError

SIMPLEX_TOL = 1e-9


def validate_simplex(labels: np.ndarray, name: str = 'labels', atol: float = SIMPLEX_TOL) -> np.ndarray:
    """Check that every row of labels is a probability vector over L >= 2 classes"""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[-1] < 2:
        raise ShapeError(f"{name} need at least 2 classes, got {labels.shape[-1]}")
    if np.any(labels < 0) or np.any(labels > 1) or np.any(np.abs(labels.sum(axis=-1) - 1.0) > atol):
        raise ParameterError(f"{name} must lie on the probability simplex")
    return labels


def check_unit_interval(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ParameterError(f"{name} must be in [0, 1], got {value}")
    return float(value)


@dataclass
class Dataset:
    """Feature matrix with per-example soft labels and optional hard labels.

    metadata carries the class-name mapping ('class_names'), generator details
    and, for noisy generators, the indices whose labels were flipped.
    """
    features: np.ndarray
    soft_labels: np.ndarray
    hard_labels: Optional[np.ndarray] = None
    name: str = 'dataset'
    seed: Optional[int] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
        if self.features.ndim != 2 or self.soft_labels.ndim != 2:
            raise ShapeError("features and soft_labels must be 2-D")
        if self.features.shape[0] == 0:
            raise ConfigurationError(f"Dataset '{self.name}' has no rows")
        if self.features.shape[0] != self.soft_labels.shape[0]:
            raise ShapeError(f"{self.features.shape[0]} feature rows but {self.soft_labels.shape[0]} labels")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError(f"Dataset '{self.name}' has non-finite features")
        validate_simplex(self.soft_labels, 'soft_labels')

        if self.hard_labels is not None:
            self.hard_labels = np.asarray(self.hard_labels, dtype=np.int64)
            if self.hard_labels.shape != (self.n,):
                raise ShapeError(f"hard_labels must have shape ({self.n},)")
            if np.any(self.hard_labels < 0) or np.any(self.hard_labels >= self.n_classes):
                raise ParameterError("hard_labels out of class range")
            one_hot_rows = np.isclose(self.soft_labels.max(axis=1), 1.0, rtol=0, atol=SIMPLEX_TOL)
            if np.any(self.soft_labels[one_hot_rows].argmax(axis=1) != self.hard_labels[one_hot_rows]):
                raise ParameterError("hard_labels disagree with one-hot soft_labels")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.soft_labels.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        metadata = {}
        for key, value in self.metadata.items():
            if key == 'flipped':
                continue
            # Per-row arrays follow the rows
            per_row = isinstance(value, np.ndarray) and value.ndim >= 1 and value.shape[0] == self.n
            metadata[key] = value[indices] if per_row else value
        if 'flipped' in self.metadata:
            # Re-index the flipped positions into the subset
            position = {int(i): j for j, i in enumerate(indices)}
            metadata['flipped'] = np.array(
                sorted(position[int(i)] for i in self.metadata['flipped'] if int(i) in position), dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            soft_labels=self.soft_labels[indices],
            hard_labels=None if self.hard_labels is None else self.hard_labels[indices],
            name=name or self.name,
            seed=self.seed,
            metadata=metadata
        )

    def with_soft_labels(self, soft_labels: np.ndarray) -> 'Dataset':
        """Same points, new training targets; hard labels are dropped"""
        return dataclasses.replace(self, soft_labels=np.asarray(soft_labels, dtype=np.float64),
                                   hard_labels=None, metadata=dict(self.metadata))
