import csv
import logging
import math
import os
from typing import Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigurationError, DataIOError, ParameterError, ParseError
from models.dataset import Dataset
from models.experiment import DatasetSpec
from services.seeding import check_seed
from services.theory import SyntheticProblem, make_problem, sample_dataset

logger = logging.getLogger(__name__)

# Class index of the positive event Y = 1 (component 0 of a binary soft label)
POSITIVE_CLASS = 0

# Component means of the two-Gaussian toy problem; identity covariance
POSITIVE_MEAN = (-2.0, -2.0)
NEGATIVE_MEAN = (2.0, 2.0)


def one_hot(class_index: Union[int, np.ndarray], n_classes: int) -> np.ndarray:
    """
    One-hot encode class indices
    Args:
        class_index: an index or an array of indices
        n_classes: L
    Returns:
        (L,) vector or (n, L) matrix
    """
    indices = np.asarray(class_index, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= n_classes):
        raise ParameterError(f"class index out of range [0, {n_classes})")
    return np.eye(n_classes, dtype=np.float64)[indices]


def gen_two_gaussians(n: int, flip_fraction: float, seed: int) -> Dataset:
    """
    Two unit-covariance Gaussians, positives bottom-left, with an exact-size
    uniformly chosen subset of labels swapped
    Args:
        n: even number of points, n/2 per component
        flip_fraction: share of labels to swap, in [0, 1)
        seed: generator seed
    Returns:
        Dataset whose metadata records the flipped indices
    """
    if n < 2 or n % 2:
        raise ParameterError(f"n must be an even number >= 2, got {n}")
    if not 0.0 <= flip_fraction < 1.0:
        raise ParameterError(f"flip_fraction must be in [0, 1), got {flip_fraction}")

    rng = np.random.default_rng(check_seed(seed))
    half = n // 2
    positives = rng.normal(loc=POSITIVE_MEAN, scale=1.0, size=(half, 2))
    negatives = rng.normal(loc=NEGATIVE_MEAN, scale=1.0, size=(half, 2))
    features = np.vstack([positives, negatives])
    component = np.concatenate([np.full(half, POSITIVE_CLASS), np.full(half, 1 - POSITIVE_CLASS)])

    flipped = np.sort(rng.choice(n, size=math.floor(flip_fraction * n), replace=False))
    labels = component.copy()
    labels[flipped] = 1 - labels[flipped]

    return Dataset(
        features=features,
        soft_labels=one_hot(labels, 2),
        hard_labels=labels,
        name='two_gaussians',
        seed=seed,
        metadata={'class_names': ['positive', 'negative'], 'flipped': flipped, 'component': component}
    )


def gen_smooth_problem(n: int, dim: int, eta_spec, seed: int) -> Tuple[Dataset, SyntheticProblem]:
    """
    Uniform points on the unit cube with Bernoulli(eta(x)) labels
    Args:
        eta_spec: 'constant[:value]', 'linear', 'sine' or 'quadratic' on the mean coordinate
    Returns:
        (Dataset, SyntheticProblem); label component 0 is the event Y = 1
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    problem = make_problem(eta_spec, dim)
    dataset = sample_dataset(problem, n, np.random.default_rng(check_seed(seed)))
    dataset.name = f"smooth_{problem.name}"
    dataset.seed = seed
    return dataset, problem


def _check_field_counts(path: str):
    """Every non-blank row must have as many fields as the first one"""
    width = None
    try:
        with open(path, newline='', encoding='utf-8') as handle:
            reader = csv.reader(handle, skipinitialspace=True)
            for fields in reader:
                if not fields or (len(fields) == 1 and not fields[0].strip()):
                    continue
                if width is None:
                    width = len(fields)
                elif len(fields) != width:
                    raise ParseError(f"{path}: inconsistent column count at line {reader.line_num} "
                                     f"(expected {width} fields, found {len(fields)})")
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"Failed to read {path}: {e}") from e
    except csv.Error as e:
        raise ParseError(f"Failed to parse {path}: {e}") from e
    if width is None:
        raise ParseError(f"{path} is empty")


def load_csv(path: str, label_column: Union[str, int], has_header: bool = True) -> Dataset:
    """
    Load a comma-separated table with one label column and numeric features
    Args:
        path: CSV file, UTF-8, '.' decimal
        label_column: header name, or a 0-based column position
        has_header: whether the first row names the columns
    Returns:
        Dataset; labels mapped to classes in order of first appearance
    """
    if not os.path.exists(path):
        raise DataIOError(f"Data file not found: {path}")
    _check_field_counts(path)
    try:
        frame = pd.read_csv(path, header=0 if has_header else None, dtype=str,
                            keep_default_na=False, encoding='utf-8', skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"Failed to parse {path}: no columns ({e})") from e
    except pd.errors.ParserError as e:
        raise ParseError(f"Failed to parse {path}: inconsistent column count ({e})") from e
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"Failed to read {path}: {e}") from e

    columns = list(frame.columns)
    if label_column in columns:
        label_name = label_column
    elif isinstance(label_column, int) or str(label_column).isdigit():
        position = int(label_column)
        if position >= len(columns):
            raise ConfigurationError(f"Label column {position} not in {path} ({len(columns)} columns)")
        label_name = columns[position]
    else:
        raise ConfigurationError(f"Label column '{label_column}' not in {path}")
    if frame.shape[0] == 0:
        raise ParseError(f"{path} has no data rows")

    feature_names = [column for column in columns if column != label_name]
    cells = frame[feature_names]
    blank = cells.apply(lambda column: column.str.strip() == '')
    numeric = cells.apply(pd.to_numeric, errors='coerce')
    bad = blank | numeric.isna()
    if bad.to_numpy().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        line = row + (2 if has_header else 1)
        raise ParseError(f"{path}: non-numeric or missing value {cells.iat[row, col]!r} "
                         f"at line {line}, column '{feature_names[col]}'")

    # Parse from the original strings so values round-trip exactly
    features = cells.to_numpy(dtype=str).astype(np.float64)
    labels = frame[label_name].str.strip()
    if (labels == '').any():
        line = int(np.flatnonzero(labels.to_numpy() == '')[0]) + (2 if has_header else 1)
        raise ParseError(f"{path}: missing label at line {line}")
    codes, class_names = pd.factorize(labels, sort=False)
    if len(class_names) < 2:
        raise ParseError(f"{path}: need at least 2 classes, found {len(class_names)}")

    logger.info(f"Loaded {features.shape[0]} rows x {features.shape[1]} features, "
                f"{len(class_names)} classes from {path}")
    return Dataset(
        features=features,
        soft_labels=one_hot(codes, len(class_names)),
        hard_labels=codes,
        name=os.path.splitext(os.path.basename(path))[0],
        metadata={'class_names': [str(name) for name in class_names], 'source': path,
                  'feature_names': [str(name) for name in feature_names], 'label_column': str(label_name)}
    )


def save_csv(dataset: Dataset, path: str):
    """Write features at full precision and the hard label by class name"""
    if dataset.hard_labels is None:
        raise ConfigurationError("save_csv needs hard labels")
    names = dataset.metadata.get('feature_names') or [f"x{i + 1}" for i in range(dataset.dim)]
    class_names = dataset.metadata.get('class_names') or [str(i) for i in range(dataset.n_classes)]
    frame = pd.DataFrame(dataset.features, columns=names)
    frame[dataset.metadata.get('label_column', 'label')] = [class_names[i] for i in dataset.hard_labels]
    try:
        frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    except OSError as e:
        raise DataIOError(f"Failed to write {path}: {e}") from e


def split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded disjoint train/test split; both parts non-empty"""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if dataset.n < 2:
        raise ParameterError("Cannot split a dataset with fewer than 2 rows")
    order = np.random.default_rng(check_seed(seed, 'split seed')).permutation(dataset.n)
    n_test = min(max(int(round(test_fraction * dataset.n)), 1), dataset.n - 1)
    return (dataset.subset(np.sort(order[n_test:]), name=f"{dataset.name}_train"),
            dataset.subset(np.sort(order[:n_test]), name=f"{dataset.name}_test"))


def build_dataset(spec: DatasetSpec) -> Dataset:
    """Materialize the dataset an experiment file describes"""
    if spec.kind == 'two_gaussians':
        return gen_two_gaussians(spec.n, spec.flip_fraction, spec.seed)
    if spec.kind == 'smooth':
        dataset, _ = gen_smooth_problem(spec.n, spec.dim, spec.eta, spec.seed)
        return dataset
    return load_csv(spec.path, spec.label_column, spec.has_header)


def load_split(spec: DatasetSpec) -> Tuple[Dataset, Dataset]:
    return split(build_dataset(spec), spec.test_fraction, spec.split_seed)
