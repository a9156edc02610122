"""Experiment records and the INI experiment-file format.

File layout (every key optional unless noted):

    [experiment]
    name = two_gaussians_knn
    n_runs = 5
    base_seed = 0
    prelim_seed = 1000
    epochs = 20
    batch_size = 128
    learning_rate = 0.001
    hidden_sizes = 32, 32

    [dataset]
    kind = two_gaussians          ; two_gaussians | smooth | csv
    n = 3000
    flip_fraction = 0.1
    seed = 7
    test_fraction = 0.3333
    split_seed = 11               ; required
    # smooth: dim, eta   csv: path, label_column, has_header

    [method]
    name = knn_ls                 ; required
    a = 1.0
    b = 0.5
    k = 10

    [sweep]                       ; value lists, swept in the order written
    a = 0.5, 1.0
    b = 0, 0.5, 0.9

    [theory]
    eta = sine
    dim = 1
    schedule = minimax            ; minimax | linear
    beta = 0.1
    n_grid = 1000, 4000, 16000, 64000
    trials = 5
    delta = 0.05
    grid_resolution = 512
"""

from __future__ import annotations

import configparser
import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from errors import ConfigurationError, DataIOError
from services.seeding import check_seed

METHODS = ('control', 'lp_reg', 'anchor', 'codistill', 'bitempered', 'mixup',
           'ensemble', 'label_smoothing', 'knn_ls')

# Hyperparameters each method accepts, with their types
METHOD_FIELDS: Dict[str, Dict[str, type]] = {
    'control': {},
    'lp_reg': {'a': float, 'p': int},
    'anchor': {'a': float},
    'codistill': {'a': float, 'psi': str, 'n_warm': int},
    'bitempered': {'t1': float, 't2': float, 'n_iters': int},
    'mixup': {'a': float},
    'ensemble': {'m': int},
    'label_smoothing': {'a': float},
    'knn_ls': {'a': float, 'b': float, 'k': int},
}

METHOD_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'lp_reg': {'a': 0.01, 'p': 2},
    'anchor': {'a': 0.5},
    'codistill': {'a': 0.1, 'psi': 'ce', 'n_warm': 100},
    'bitempered': {'t1': 0.7, 't2': 2.0, 'n_iters': 5},
    'mixup': {'a': 0.2},
    'ensemble': {'m': 5},
    'label_smoothing': {'a': 0.1},
    'knn_ls': {'a': 1.0, 'b': 0.9, 'k': 10},
}

SMOOTHING_A_GRID = [0.005, 0.01, 0.02, 0.05, 0.1, 0.5, 0.8, 0.9, 1.0]
REGULARIZATION_A_GRID = [0.001, 0.01, 0.05, 0.1, 0.2, 0.5]
CODISTILL_WARMUP_GRID = [100, 200]

DEFAULT_GRIDS: Dict[str, Dict[str, list]] = {
    'knn_ls': {'k': [5, 10, 100, 500], 'a': SMOOTHING_A_GRID, 'b': [0.0, 0.05, 0.1, 0.5, 0.9]},
    'anchor': {'a': SMOOTHING_A_GRID},
    'label_smoothing': {'a': SMOOTHING_A_GRID},
    'lp_reg': {'p': [1, 2], 'a': REGULARIZATION_A_GRID},
    # n_warm counts optimizer steps; 2000 training points at batch 128 for 20 epochs is 320 steps
    'codistill': {'psi': ['ce', 'kl'], 'a': REGULARIZATION_A_GRID, 'n_warm': CODISTILL_WARMUP_GRID},
    'bitempered': {'t1': [0.3, 0.5, 0.7, 0.9], 't2': [1.0, 2.0, 3.0, 4.0], 'n_iters': [5]},
    'mixup': {'a': [0.2, 0.3, 0.4, 0.5]},
    'ensemble': {'m': [3, 5]},
    'control': {},
}

# One-at-a-time k-NN LS ablations: (fixed hyperparameters, ablated name, values)
KNN_ABLATIONS: List[Tuple[Dict[str, Any], str, list]] = [
    ({'k': 10, 'a': 1.0}, 'b', [0.0, 0.05, 0.1, 0.5, 0.9]),
    ({'k': 10, 'a': 0.5}, 'b', [0.0, 0.05, 0.1, 0.5, 0.9]),
    ({'k': 10, 'b': 0.9}, 'a', SMOOTHING_A_GRID),
    ({'k': 10, 'b': 0.5}, 'a', SMOOTHING_A_GRID),
    ({'a': 1.0, 'b': 0.9}, 'k', [10, 100, 500]),
]


def _coerce(name: str, kind: type, value: Any) -> Any:
    try:
        if kind is int:
            try:
                return int(str(value).strip())
            except ValueError:
                pass
            as_float = float(value)
            if not as_float.is_integer():
                raise ValueError(value)
            return int(as_float)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"Hyperparameter '{name}' expects {kind.__name__}, got {value!r}")


@dataclass(frozen=True)
class SmoothingParams:
    """k-NN label smoothing knobs: a (original vs smoothed), b (global vs local), k"""
    a: float
    b: float
    k: int

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0 or not 0.0 <= self.b <= 1.0 or self.k < 1:
            raise ConfigurationError(f"Invalid smoothing parameters a={self.a}, b={self.b}, k={self.k}")


@dataclass
class BaselineSpec:
    """A method tag plus the hyperparameters relevant to it"""
    method: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHOD_FIELDS:
            raise ConfigurationError(f"Unknown method '{self.method}', expected one of {', '.join(METHODS)}")
        allowed = METHOD_FIELDS[self.method]
        unknown = sorted(set(self.params) - set(allowed))
        if unknown:
            raise ConfigurationError(f"Method '{self.method}' does not take {', '.join(unknown)}")
        merged = dict(METHOD_DEFAULTS.get(self.method, {}))
        merged.update(self.params)
        self.params = {name: _coerce(name, allowed[name], merged[name]) for name in allowed}

    def with_params(self, **updates) -> 'BaselineSpec':
        return BaselineSpec(self.method, {**self.params, **updates})

    def smoothing(self) -> SmoothingParams:
        if self.method != 'knn_ls':
            raise ConfigurationError(f"Method '{self.method}' has no k-NN smoothing parameters")
        return SmoothingParams(a=self.params['a'], b=self.params['b'], k=self.params['k'])

    def label(self) -> str:
        if not self.params:
            return self.method
        return f"{self.method} ({', '.join(f'{k}={v}' for k, v in self.params.items())})"


@dataclass
class DatasetSpec:
    kind: str = 'two_gaussians'
    n: int = 3000
    flip_fraction: float = 0.1
    dim: int = 1
    eta: str = 'sine'
    seed: int = 0
    path: Optional[str] = None
    label_column: Optional[str] = None
    has_header: bool = True
    test_fraction: float = 1.0 / 3.0
    split_seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ('two_gaussians', 'smooth', 'csv'):
            raise ConfigurationError(f"Unknown dataset kind '{self.kind}'")
        if self.kind == 'csv' and (not self.path or self.label_column is None):
            raise ConfigurationError("csv datasets need 'path' and 'label_column'")
        if self.split_seed is None:
            raise ConfigurationError("The dataset needs an explicit split_seed")
        check_seed(self.seed, 'dataset seed', ConfigurationError)
        check_seed(self.split_seed, 'split_seed', ConfigurationError)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    method: BaselineSpec
    name: str = 'experiment'
    hidden_sizes: List[int] = field(default_factory=lambda: [256, 256])
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    n_runs: int = 5
    base_seed: int = 0
    prelim_seed: int = 1000

    def __post_init__(self):
        if self.n_runs < 2:
            raise ConfigurationError(f"n_runs must be >= 2 to measure churn, got {self.n_runs}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigurationError("epochs and batch_size must be positive and learning_rate non-negative")
        check_seed(self.base_seed, 'base_seed', ConfigurationError)
        check_seed(self.prelim_seed, 'prelim_seed', ConfigurationError)

    def with_method(self, method: BaselineSpec) -> 'ExperimentConfig':
        return dataclasses.replace(self, method=method)

    def fingerprint_payload(self) -> Dict[str, Any]:
        """Everything that shapes the predictions except the seeds"""
        return {
            'dataset': dataclasses.asdict(self.dataset),
            'method': self.method.method,
            'params': self.method.params,
            'hidden_sizes': list(self.hidden_sizes),
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'lr': self.lr,
        }


@dataclass
class SweepGrid:
    """Per-hyperparameter value lists; points enumerate in declared order"""
    values: Dict[str, list]

    def __post_init__(self):
        for name, options in self.values.items():
            if len(options) == 0:
                raise ConfigurationError(f"Sweep over '{name}' has no values")

    @classmethod
    def default_for(cls, method: str) -> 'SweepGrid':
        if method not in DEFAULT_GRIDS:
            raise ConfigurationError(f"No default grid for method '{method}'")
        return cls({name: list(options) for name, options in DEFAULT_GRIDS[method].items()})

    def points(self) -> List[Dict[str, Any]]:
        names = list(self.values)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.values[n] for n in names))]

    def __len__(self):
        return len(self.points())


@dataclass
class TheoryConfig:
    eta: str = 'sine'
    dim: int = 1
    schedule: str = 'minimax'
    beta: float = 0.1
    n_grid: List[int] = field(default_factory=lambda: [1000, 4000, 16000, 64000])
    trials: int = 5
    delta: float = 0.05
    grid_resolution: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ('minimax', 'linear'):
            raise ConfigurationError(f"Unknown k schedule '{self.schedule}'")
        check_seed(self.seed, 'theory seed', ConfigurationError)


def _split_list(raw: str, kind: type) -> list:
    items = [item.strip() for item in raw.split(',') if item.strip()]
    return [_coerce('list value', kind, item) if kind is not str else item for item in items]


def _sweep_value(raw: str):
    for kind in (int, float):
        try:
            return _coerce('sweep value', kind, raw)
        except ConfigurationError:
            continue
    return raw


_SECTION_KEYS = {
    'experiment': {'name': str, 'n_runs': int, 'base_seed': int, 'prelim_seed': int, 'epochs': int,
                   'batch_size': int, 'learning_rate': float, 'hidden_sizes': list},
    'dataset': {'kind': str, 'n': int, 'flip_fraction': float, 'dim': int, 'eta': str, 'seed': int,
                'path': str, 'label_column': str, 'has_header': bool, 'test_fraction': float,
                'split_seed': int},
    'theory': {'eta': str, 'dim': int, 'schedule': str, 'beta': float, 'n_grid': list, 'trials': int,
               'delta': float, 'grid_resolution': int, 'seed': int},
}


def _read_section(parser: configparser.ConfigParser, section: str) -> Dict[str, Any]:
    keys = _SECTION_KEYS[section]
    values = {}
    for key, raw in parser.items(section):
        if key not in keys:
            raise ConfigurationError(f"Unknown key '{key}' in [{section}]")
        kind = keys[key]
        if kind is bool:
            values[key] = parser.getboolean(section, key)
        elif kind is list:
            values[key] = _split_list(raw, int)
        else:
            values[key] = _coerce(key, kind, raw)
    return values


@dataclass
class ExperimentFile:
    experiment: Optional[ExperimentConfig] = None
    sweep: Optional[SweepGrid] = None
    theory: Optional[TheoryConfig] = None


def load_experiment_file(path: str) -> ExperimentFile:
    """Parse an INI experiment file into typed records"""
    parser = configparser.ConfigParser(inline_comment_prefixes=(';', '#'), interpolation=None)
    try:
        with open(path, encoding='utf-8') as handle:
            parser.read_file(handle)
    except OSError as e:
        raise DataIOError(f"Failed to read experiment file {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigurationError(f"Malformed experiment file {path}: {e}") from e

    unknown = sorted(set(parser.sections()) - {'experiment', 'dataset', 'method', 'sweep', 'theory'})
    if unknown:
        raise ConfigurationError(f"Unknown sections in {path}: {', '.join(unknown)}")

    result = ExperimentFile()
    if parser.has_section('method'):
        method_values = dict(parser.items('method'))
        if 'name' not in method_values:
            raise ConfigurationError("[method] needs a 'name'")
        method = BaselineSpec(method_values.pop('name'), method_values)
        experiment = _read_section(parser, 'experiment') if parser.has_section('experiment') else {}
        dataset = _read_section(parser, 'dataset') if parser.has_section('dataset') else {}
        if 'learning_rate' in experiment:
            experiment['lr'] = experiment.pop('learning_rate')
        result.experiment = ExperimentConfig(dataset=DatasetSpec(**dataset), method=method, **experiment)

    if parser.has_section('sweep'):
        result.sweep = SweepGrid({key: [_sweep_value(item.strip()) for item in raw.split(',') if item.strip()]
                                  for key, raw in parser.items('sweep')})

    if parser.has_section('theory'):
        result.theory = TheoryConfig(**_read_section(parser, 'theory'))
    return result
