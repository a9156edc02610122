import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from errors import ChurnLabError, ConfigurationError, ExperimentError
from models.dataset import Dataset
from models.experiment import KNN_ABLATIONS, BaselineSpec, ExperimentConfig, SweepGrid
from models.network import TrainConfig, TrainedModel
from models.run_record import ChurnReport, ExperimentResult, RunRecord, append_jsonl
from services.baselines import (BiTemperedLoss, LpRegLoss, MixupTransform, anchor_labels, ensemble_predict,
                                train_codistill, train_ensemble)
from services.churn_metrics import pairwise_stats
from services.data_service import load_split
from services.label_smoothing import deep_knn_pipeline, global_label_smooth
from services.nn_core import predict, train
from services.seeding import SEED_MASK, check_seed, derive_seed, fingerprint, stable_offset

logger = logging.getLogger(__name__)

RUNS_FILE = 'runs.jsonl'
WORKER_LOG_FORMAT = '%(asctime)s %(process)d %(levelname)s %(name)s: %(message)s'

# Sub-stream keys for seeds derived from a run seed
PRELIM_KEY = 1
PEER_KEY = 2
ENSEMBLE_KEY = 100


@dataclass
class SweepOutcome:
    """Completed settings in grid order plus the points that failed"""
    results: List[ExperimentResult] = field(default_factory=list)
    failures: List[Tuple[Dict[str, Any], str]] = field(default_factory=list)

    def reports(self) -> List[Tuple[Dict[str, Any], ChurnReport]]:
        return [(result.hyperparams, result.report) for result in self.results]


def point_seed(base_seed: int, hyperparams: Dict[str, Any]) -> int:
    """Seed base of a grid point: base_seed offset by a stable hash of its coordinates"""
    return (int(base_seed) + stable_offset(hyperparams)) & SEED_MASK


def train_config_for(config: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(hidden_sizes=list(config.hidden_sizes), epochs=config.epochs, batch_size=config.batch_size,
                       lr=config.lr, seed=seed, prelim_seed=config.prelim_seed)


def anchor_model(train_set: Dataset, config: ExperimentConfig) -> TrainedModel:
    """Preliminary model shared by every anchor run of an experiment"""
    logger.info(f"Training anchor model (seed={config.prelim_seed})")
    return train(train_set, train_config_for(config, config.prelim_seed))


def train_and_predict(method: BaselineSpec, train_set: Dataset, test_set: Dataset, train_config: TrainConfig,
                      prelim: Optional[TrainedModel] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Train one model with the given method and predict the test set
    Args:
        train_config: seed is the run seed; per-method auxiliary seeds derive from it
        prelim: the fixed preliminary model ('anchor' only)
    Returns:
        (predicted classes, probability rows) on test_set
    """
    params = method.params
    seed = train_config.seed
    name = method.method

    if name == 'control':
        model = train(train_set, train_config)
    elif name == 'lp_reg':
        model = train(train_set, dataclasses.replace(train_config, loss=LpRegLoss(a=params['a'], p=params['p'])))
    elif name == 'bitempered':
        loss = BiTemperedLoss(t1=params['t1'], t2=params['t2'], n_iters=params['n_iters'])
        model = train(train_set, dataclasses.replace(train_config, loss=loss))
    elif name == 'mixup':
        model = train(train_set, dataclasses.replace(train_config, batch_transform=MixupTransform(a=params['a'])))
    elif name == 'label_smoothing':
        model = train(train_set.with_soft_labels(global_label_smooth(train_set.soft_labels, params['a'])),
                      train_config)
    elif name == 'anchor':
        if prelim is None:
            raise ConfigurationError("The anchor method needs a preliminary model")
        _, prelim_probs = predict(prelim, train_set.features)
        model = train(train_set.with_soft_labels(anchor_labels(train_set.soft_labels, prelim_probs, params['a'])),
                      train_config)
    elif name == 'codistill':
        peer_config = dataclasses.replace(train_config, prelim_seed=derive_seed(seed, PEER_KEY))
        model, _ = train_codistill(train_set, peer_config, params['a'], params['psi'], params['n_warm'])
    elif name == 'ensemble':
        member_seeds = [derive_seed(seed, ENSEMBLE_KEY + j) for j in range(params['m'])]
        return ensemble_predict(train_ensemble(train_set, train_config, member_seeds), test_set.features)
    elif name == 'knn_ls':
        phase1_config = dataclasses.replace(train_config, prelim_seed=derive_seed(seed, PRELIM_KEY))
        model = deep_knn_pipeline(train_set, phase1_config, method.smoothing())
    else:
        raise ConfigurationError(f"Unknown method '{name}'")
    return predict(model, test_set.features)


def run_setting(config: ExperimentConfig, seed_base: Optional[int] = None,
                split: Optional[Tuple[Dataset, Dataset]] = None) -> ExperimentResult:
    """
    n_runs trainings of one method on one fixed split
    Args:
        seed_base: run r uses seed_base + r (config.base_seed when omitted)
        split: precomputed (train, test) sets; built from config.dataset otherwise
    Returns:
        ExperimentResult with every RunRecord and the pairwise report
    """
    seed_base = check_seed(config.base_seed if seed_base is None else seed_base, 'seed_base')
    train_set, test_set = split or load_split(config.dataset)
    if test_set.hard_labels is None:
        raise ConfigurationError("The test set needs hard labels")
    setting_id = fingerprint({**config.fingerprint_payload(), 'seed_base': seed_base})
    prelim = None
    if config.method.method == 'anchor':
        try:
            prelim = anchor_model(train_set, config)
        except (ChurnLabError, RuntimeError, ValueError, ArithmeticError) as e:
            raise ExperimentError(f"anchor model (seed={config.prelim_seed}) failed: {e}") from e

    records = []
    for r in range(config.n_runs):
        seed = (seed_base + r) & SEED_MASK
        logger.info(f"{config.method.label()}: run {r + 1}/{config.n_runs} (seed={seed})")
        try:
            predictions, probabilities = train_and_predict(config.method, train_set, test_set,
                                                           train_config_for(config, seed), prelim)
        except (ChurnLabError, RuntimeError, ValueError, ArithmeticError) as e:
            raise ExperimentError(f"run {r} ({config.method.method}) failed: {e}") from e
        records.append(RunRecord(predictions=predictions, probabilities=probabilities, seed=seed,
                                 fingerprint=setting_id, run_index=r))

    report = pairwise_stats(records, test_set.hard_labels)
    logger.info(f"{config.method.label()}: accuracy {report.accuracy_mean:.2f} ({report.accuracy_std:.2f}), "
                f"churn {report.churn_mean:.2f} ({report.churn_std:.2f})")
    return ExperimentResult(method=config.method.method, hyperparams=dict(config.method.params), report=report,
                            records=records, truth=test_set.hard_labels, fingerprint=setting_id)


def _init_worker(num_threads: int, log_level: int, log_format: str):
    logging.basicConfig(level=log_level, format=log_format)
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


def _run_point(config: ExperimentConfig, seed_base: int) -> ExperimentResult:
    return run_setting(config, seed_base)


class ExperimentService:
    def __init__(self, workers: int = 1, out_dir: Optional[str] = None, torch_threads: int = 1,
                 log_format: str = WORKER_LOG_FORMAT):
        """
        Args:
            workers: processes evaluating grid points concurrently
            out_dir: directory receiving runs.jsonl; nothing is persisted when None
            log_format: logging format of worker processes; they log at the parent's level
        """
        if workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self.out_dir = out_dir
        self.torch_threads = torch_threads
        self.log_format = log_format
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def worker_initargs(self) -> Tuple[int, int, str]:
        return self.torch_threads, logging.getLogger().getEffectiveLevel(), self.log_format

    @property
    def runs_path(self) -> Optional[str]:
        return os.path.join(self.out_dir, RUNS_FILE) if self.out_dir else None

    def _start_runs_file(self):
        if self.runs_path:
            open(self.runs_path, 'w', encoding='utf-8').close()

    def _persist(self, result: ExperimentResult):
        if self.runs_path:
            append_jsonl(self.runs_path, [result])

    def run_experiment(self, config: ExperimentConfig) -> Tuple[List[RunRecord], ChurnReport]:
        """
        Repeated-seed runs of a single method
        Returns:
            (records, report); run r uses base_seed + r, split and anchor model fixed
        """
        result = self.run_setting(config)
        return result.records, result.report

    def run_setting(self, config: ExperimentConfig) -> ExperimentResult:
        self._start_runs_file()
        result = run_setting(config)
        self._persist(result)
        return result

    def run_sweep(self, config: ExperimentConfig, grid: SweepGrid) -> List[Tuple[Dict[str, Any], ChurnReport]]:
        """One experiment per grid point; failed points are logged and skipped"""
        return self.sweep(config, grid).reports()

    def sweep(self, config: ExperimentConfig, grid: SweepGrid, fixed: Optional[Dict[str, Any]] = None,
              fresh_file: bool = True) -> SweepOutcome:
        """
        Evaluate every grid point in declared order
        Args:
            fixed: hyperparameters held constant across the grid
            fresh_file: truncate runs.jsonl first
        Returns:
            SweepOutcome; results are flushed to runs.jsonl in grid order as they complete
        """
        points = [{**(fixed or {}), **point} for point in grid.points()]
        if not points:
            raise ConfigurationError("The sweep grid is empty")
        if fresh_file:
            self._start_runs_file()

        jobs = []
        for point in points:
            point_config = config.with_method(config.method.with_params(**point))
            jobs.append((point, point_config, point_seed(config.base_seed, point_config.method.params)))
        logger.info(f"Sweeping {len(jobs)} settings of {config.method.method} with {self.workers} worker(s)")

        outcome = SweepOutcome()
        if self.workers == 1:
            for point, point_config, seed_base in jobs:
                self._collect(outcome, point, lambda: run_setting(point_config, seed_base))
            return outcome

        with ProcessPoolExecutor(max_workers=self.workers, initializer=_init_worker,
                                 initargs=self.worker_initargs()) as executor:
            futures = [executor.submit(_run_point, point_config, seed_base) for _, point_config, seed_base in jobs]
            # Single writer: results are consumed in grid order
            for (point, _, _), future in zip(jobs, futures):
                self._collect(outcome, point, future.result)
        return outcome

    def _collect(self, outcome: SweepOutcome, point: Dict[str, Any], produce):
        try:
            result = produce()
        except Exception as e:
            logger.exception(f"Grid point {point} failed: {e}")
            outcome.failures.append((point, str(e)))
            return
        outcome.results.append(result)
        self._persist(result)

    def run_ablation(self, config: ExperimentConfig,
                     ablations=KNN_ABLATIONS) -> List[Tuple[str, SweepOutcome]]:
        """
        One-at-a-time k-NN label smoothing sweeps
        Returns:
            (label, outcome) per ablation, e.g. ('k=10, a=1.0 over b', ...)
        """
        knn_config = config if config.method.method == 'knn_ls' else config.with_method(BaselineSpec('knn_ls'))
        self._start_runs_file()
        outcomes = []
        for fixed, name, values in ablations:
            label = f"{', '.join(f'{k}={v}' for k, v in fixed.items())} over {name}"
            logger.info(f"Ablation: {label}")
            outcomes.append((label, self.sweep(knn_config, SweepGrid({name: list(values)}), fixed=fixed,
                                               fresh_file=False)))
        return outcomes
