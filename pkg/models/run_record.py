from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from errors import DataIOError, ParseError, ShapeError


@dataclass
class RunRecord:
    """Per-test-example predictions of one training run"""
    predictions: np.ndarray
    probabilities: np.ndarray
    seed: int
    fingerprint: str
    run_index: int = 0

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.int64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.probabilities.ndim != 2 or self.probabilities.shape[0] != self.predictions.shape[0]:
            raise ShapeError("probabilities must have one row per prediction")
        if np.any(self.predictions < 0) or np.any(self.predictions >= self.probabilities.shape[1]):
            raise ShapeError("predicted classes out of range")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'type': 'run',
            'fingerprint': self.fingerprint,
            'run_index': self.run_index,
            'seed': self.seed,
            'predictions': self.predictions.tolist(),
            'probabilities': self.probabilities.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunRecord':
        return cls(predictions=data['predictions'], probabilities=data['probabilities'], seed=data['seed'],
                   fingerprint=data['fingerprint'], run_index=data.get('run_index', 0))


@dataclass
class ChurnReport:
    """Accuracy and churn statistics in percent; std is over runs / pairs"""
    accuracy_mean: float
    accuracy_std: float
    churn_mean: float
    churn_std: float
    churn_correct_mean: Optional[float]
    churn_correct_std: Optional[float]
    churn_incorrect_mean: Optional[float]
    churn_incorrect_std: Optional[float]
    n_runs: int
    n_pairs: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ChurnReport':
        return cls(**data)


@dataclass
class ExperimentResult:
    """One method/hyperparameter setting: its runs, its report and the test truth"""
    method: str
    hyperparams: Dict[str, Any]
    report: ChurnReport
    records: List[RunRecord] = field(default_factory=list)
    truth: Optional[np.ndarray] = None
    fingerprint: str = ''

    def setting_dict(self) -> Dict[str, Any]:
        return {
            'type': 'setting',
            'fingerprint': self.fingerprint,
            'method': self.method,
            'hyperparams': self.hyperparams,
            'truth': None if self.truth is None else np.asarray(self.truth).tolist(),
        }


def _dumps(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def append_jsonl(path: str, results: Iterable[ExperimentResult]):
    """Append each setting line followed by its run lines"""
    try:
        with open(path, 'a', encoding='utf-8') as handle:
            for result in results:
                handle.write(_dumps(result.setting_dict()) + '\n')
                for record in result.records:
                    handle.write(_dumps(record.to_dict()) + '\n')
    except OSError as e:
        raise DataIOError(f"Failed to write run records to {path}: {e}") from e


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """
    Group a run-record file by setting
    Returns:
        One dict per setting: method, hyperparams, fingerprint, truth, records
    """
    settings: Dict[str, Dict[str, Any]] = {}
    try:
        with open(path, encoding='utf-8') as handle:
            for line_number, line in enumerate(handle, 1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(f"{path}:{line_number}: invalid JSON ({e})") from e
                if data.get('type') == 'setting':
                    settings[data['fingerprint']] = {**data, 'records': []}
                elif data.get('type') == 'run':
                    if data['fingerprint'] not in settings:
                        raise ParseError(f"{path}:{line_number}: run line before its setting line")
                    settings[data['fingerprint']]['records'].append(RunRecord.from_dict(data))
                else:
                    raise ParseError(f"{path}:{line_number}: unknown line type {data.get('type')!r}")
    except OSError as e:
        raise DataIOError(f"Failed to read run records from {path}: {e}") from e
    return list(settings.values())


def is_missing(value: Optional[float]) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))
