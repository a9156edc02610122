"""Global and k-NN label smoothing, and the two-phase deep k-NN pipeline."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np
import torch

from errors import ParameterError, ShapeError
from models.dataset import Dataset, check_unit_interval, validate_simplex
from models.experiment import SmoothingParams
from models.network import TrainConfig, TrainedModel
from services.nn_core import forward_logits, train

logger = logging.getLogger(__name__)

# Upper bound on query-by-point-by-dimension entries materialized at once
CHUNK_ELEMENTS = 4_000_000


@dataclass
class NeighborQueryResult:
    """k-NN ball of one query: its radius and every point inside it"""
    radius: float
    members: np.ndarray


def global_label_smooth(y: np.ndarray, a: float) -> np.ndarray:
    """(1 - a) * y + (a / L) * 1_L, row-wise"""
    a = check_unit_interval('a', a)
    y = np.asarray(y, dtype=np.float64)
    return (1.0 - a) * y + a / y.shape[-1]


def knn_smooth_label(y: np.ndarray, eta_k: np.ndarray, a: float, b: float) -> np.ndarray:
    """(1 - a) * y + a * (b / L * 1_L + (1 - b) * eta_k), row-wise"""
    a = check_unit_interval('a', a)
    b = check_unit_interval('b', b)
    y = np.asarray(y, dtype=np.float64)
    eta_k = np.asarray(eta_k, dtype=np.float64)
    if y.shape != eta_k.shape:
        raise ShapeError(f"y {y.shape} and eta_k {eta_k.shape} differ in shape")
    return (1.0 - a) * y + a * (b / y.shape[-1] + (1.0 - b) * eta_k)


def _as_points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] == 0:
        raise ShapeError("points must be a non-empty (n, D) array")
    return points


def _as_queries(queries, dim: int) -> np.ndarray:
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 0 or (queries.ndim == 1 and dim != 1 and queries.shape[0] == dim):
        queries = queries.reshape(1, -1)
    elif queries.ndim == 1:
        queries = queries[:, None]
    if queries.shape[1] != dim:
        raise ShapeError(f"queries have width {queries.shape[1]}, points have width {dim}")
    return queries


def _check_k(k: int, n: int) -> int:
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    return int(k)


def _distance_chunks(queries: np.ndarray, points: np.ndarray) -> Iterator[Tuple[slice, np.ndarray]]:
    """Euclidean distances from consecutive query blocks to every point"""
    n, dim = points.shape
    block = max(1, CHUNK_ELEMENTS // (n * dim))
    for start in range(0, queries.shape[0], block):
        rows = slice(start, min(start + block, queries.shape[0]))
        diff = queries[rows, None, :] - points[None, :, :]
        yield rows, np.sqrt((diff ** 2).sum(axis=-1))


def knn_query(query, points, k: int) -> NeighborQueryResult:
    """
    k-NN radius and ball members of a single query point
    Args:
        query: one point of width D (a scalar is accepted when D == 1)
        points: (n, D) reference points
        k: 1 <= k <= n
    Returns:
        NeighborQueryResult; every point at distance <= radius is a member
    """
    points = _as_points(points)
    k = _check_k(k, points.shape[0])
    query = _as_queries(query, points.shape[1])
    if query.shape[0] != 1:
        raise ShapeError("knn_query takes a single query point")
    distances = np.sqrt(((points - query[0]) ** 2).sum(axis=-1))
    radius = np.partition(distances, k - 1)[k - 1]
    return NeighborQueryResult(radius=float(radius), members=np.flatnonzero(distances <= radius))


def knn_label(query, points, labels, k: int) -> np.ndarray:
    """Mean label over the k-NN ball of query (ties at the radius included)"""
    labels = validate_simplex(labels)
    result = knn_query(query, points, k)
    return labels[result.members].mean(axis=0)


def knn_labels(queries, points, labels, k: int) -> np.ndarray:
    """
    Batched k-NN labels, identical to knn_label applied query by query
    Args:
        queries: (m, D) query points
        points: (n, D) reference points
        labels: (n, L) soft labels aligned with points
        k: 1 <= k <= n
    Returns:
        (m, L) array of k-NN labels
    """
    points = _as_points(points)
    labels = validate_simplex(labels)
    if labels.shape[0] != points.shape[0]:
        raise ShapeError(f"{points.shape[0]} points but {labels.shape[0]} labels")
    k = _check_k(k, points.shape[0])
    queries = _as_queries(queries, points.shape[1])

    result = np.empty((queries.shape[0], labels.shape[1]))
    for rows, distances in _distance_chunks(queries, points):
        radius = np.partition(distances, k - 1, axis=1)[:, k - 1]
        for offset, (row_distances, row_radius) in enumerate(zip(distances, radius)):
            result[rows.start + offset] = labels[row_distances <= row_radius].mean(axis=0)
    return result


def knn_radii(queries, points, k: int) -> np.ndarray:
    """k-NN radius of every query"""
    points = _as_points(points)
    k = _check_k(k, points.shape[0])
    queries = _as_queries(queries, points.shape[1])
    radii = np.empty(queries.shape[0])
    for rows, distances in _distance_chunks(queries, points):
        radii[rows] = np.partition(distances, k - 1, axis=1)[:, k - 1]
    return radii


def smooth_training_labels(dataset: Dataset, prelim_model: TrainedModel,
                           smoothing: SmoothingParams) -> np.ndarray:
    """
    k-NN smoothed label of every training point, neighbors taken in the
    preliminary model's logit space
    """
    with torch.no_grad():
        logits = forward_logits(prelim_model.params, dataset.features).numpy()
    eta_k = knn_labels(logits, logits, dataset.soft_labels, smoothing.k)
    return knn_smooth_label(dataset.soft_labels, eta_k, smoothing.a, smoothing.b)


def deep_knn_pipeline(dataset: Dataset, train_config: TrainConfig, smoothing: SmoothingParams) -> TrainedModel:
    """
    Train on raw labels, smooth labels by k-NN in logit space, retrain
    Args:
        dataset: training data with original labels
        train_config: seed drives the returned model, prelim_seed the phase-1 model
        smoothing: a, b, k
    Returns:
        The phase-2 model trained on the smoothed labels
    """
    _check_k(smoothing.k, dataset.n)

    logger.info(f"Phase 1: training preliminary model (seed={train_config.prelim_seed})")
    phase1_config = dataclasses.replace(train_config, seed=train_config.prelim_seed, loss=None, batch_transform=None)
    prelim_model = train(dataset, phase1_config)

    logger.info(f"Smoothing {dataset.n} labels with k={smoothing.k}, a={smoothing.a}, b={smoothing.b}")
    smoothed = smooth_training_labels(dataset, prelim_model, smoothing)

    logger.info(f"Phase 2: training on smoothed labels (seed={train_config.seed})")
    return train(dataset.with_soft_labels(smoothed), train_config)
