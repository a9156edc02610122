"""Churn, sliced churn, pairwise aggregation, Pareto frontier and model selection."""

from itertools import combinations
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from errors import ParameterError, ShapeError
from models.run_record import ChurnReport, RunRecord

# "within less than 0.1% difference in test accuracy", read as percentage points
SELECTION_TOLERANCE_PP = 0.1


def _aligned(*sequences) -> List[np.ndarray]:
    arrays = [np.asarray(seq) for seq in sequences]
    lengths = {array.shape for array in arrays}
    if len(lengths) != 1 or arrays[0].ndim != 1:
        raise ShapeError(f"Prediction sequences must be 1-D and equally long, got shapes {sorted(lengths)}")
    if arrays[0].shape[0] == 0:
        raise ShapeError("Prediction sequences must not be empty")
    return arrays


def churn(preds_a, preds_b) -> float:
    """Fraction of examples on which the two prediction sequences disagree"""
    preds_a, preds_b = _aligned(preds_a, preds_b)
    return float(np.mean(preds_a != preds_b))


def accuracy(preds, truth) -> float:
    preds, truth = _aligned(preds, truth)
    return float(np.mean(preds == truth))


def sliced_churn(preds_a, preds_b, truth) -> Tuple[Optional[float], Optional[float]]:
    """
    Churn split by whether the first run was right
    Returns:
        (churn_correct, churn_incorrect); a slice with no examples is None
    """
    preds_a, preds_b, truth = _aligned(preds_a, preds_b, truth)
    disagree = preds_a != preds_b
    correct = preds_a == truth
    churn_correct = float(np.mean(disagree[correct])) if correct.any() else None
    churn_incorrect = float(np.mean(disagree[~correct])) if (~correct).any() else None
    return churn_correct, churn_incorrect


def _std(values: Sequence[float]) -> float:
    # Sample standard deviation; a single observation has none
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _mean_std_pct(values: List[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [100.0 * v for v in values if v is not None]
    if not present:
        return None, None
    return float(np.mean(present)), _std(present)


def pairwise_stats(runs: Sequence[RunRecord], truth) -> ChurnReport:
    """
    Aggregate accuracy over runs and churn over every unordered pair of runs
    Args:
        runs: at least two RunRecords on the same test set
        truth: true test classes
    Returns:
        ChurnReport in percent; the lower-indexed run of each pair defines the
        correctness slice
    """
    if len(runs) < 2:
        raise ParameterError(f"Need at least 2 runs to measure churn, got {len(runs)}")
    truth = np.asarray(truth)

    accuracies = [100.0 * accuracy(run.predictions, truth) for run in runs]
    churns, correct_slices, incorrect_slices = [], [], []
    for first, second in combinations(runs, 2):
        churns.append(churn(first.predictions, second.predictions))
        churn_correct, churn_incorrect = sliced_churn(first.predictions, second.predictions, truth)
        correct_slices.append(churn_correct)
        incorrect_slices.append(churn_incorrect)

    churn_mean, churn_std = _mean_std_pct(churns)
    correct_mean, correct_std = _mean_std_pct(correct_slices)
    incorrect_mean, incorrect_std = _mean_std_pct(incorrect_slices)
    return ChurnReport(
        accuracy_mean=float(np.mean(accuracies)),
        accuracy_std=_std(accuracies),
        churn_mean=churn_mean,
        churn_std=churn_std,
        churn_correct_mean=correct_mean,
        churn_correct_std=correct_std,
        churn_incorrect_mean=incorrect_mean,
        churn_incorrect_std=incorrect_std,
        n_runs=len(runs),
        n_pairs=len(churns)
    )


def pareto_frontier(points: Sequence[Tuple[float, float]]) -> List[int]:
    """
    Indices of (accuracy, churn) points no other point dominates
    (accuracy >= and churn <= with at least one strict); duplicates all survive
    """
    if len(points) == 0:
        raise ParameterError("pareto_frontier needs at least one point")
    kept = []
    for i, (acc_i, churn_i) in enumerate(points):
        dominated = any(
            acc_j >= acc_i and churn_j <= churn_i and (acc_j > acc_i or churn_j < churn_i)
            for j, (acc_j, churn_j) in enumerate(points) if j != i
        )
        if not dominated:
            kept.append(i)
    return kept


def report_point(report: ChurnReport, churn_metric: str = 'churn') -> Tuple[float, float]:
    """(accuracy, churn) coordinates of a report; churn_metric is 'churn' or 'churn_correct'"""
    if churn_metric not in ('churn', 'churn_correct'):
        raise ParameterError(f"Unknown churn metric '{churn_metric}'")
    value = getattr(report, f"{churn_metric}_mean")
    return report.accuracy_mean, float('inf') if value is None else value


def select_best(settings: Sequence[Tuple[Any, ChurnReport]]) -> Tuple[Any, ChurnReport]:
    """
    Highest accuracy first; among settings within 0.1 percentage points of the
    top accuracy, the lowest churn (earliest in the list on ties)
    """
    if len(settings) == 0:
        raise ParameterError("select_best needs at least one setting")
    top = max(report.accuracy_mean for _, report in settings)
    candidates = [setting for setting in settings if top - setting[1].accuracy_mean < SELECTION_TOLERANCE_PP]
    return min(candidates, key=lambda setting: setting[1].churn_mean)
