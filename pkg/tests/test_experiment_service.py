import dataclasses
import logging
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from errors import ConfigurationError, ExperimentError, ParameterError
from models.experiment import BaselineSpec, DatasetSpec, ExperimentConfig, SweepGrid, load_experiment_file
from services.churn_metrics import churn, select_best
from services.data_service import load_split
from services.experiment_service import (WORKER_LOG_FORMAT, ExperimentService, _init_worker, point_seed,
                                         run_setting, train_and_predict, train_config_for)
from services.nn_core import train
from services.report_service import results_from_jsonl

EXPERIMENTS_DIR = Path(__file__).resolve().parent.parent / 'experiments'


class TestExperimentFile:

    def test_shipped_files_load(self):
        knn = load_experiment_file(str(EXPERIMENTS_DIR / 'two_gaussians_knn.ini')).experiment
        assert knn.method.params == {'a': 1.0, 'b': 0.5, 'k': 10}
        assert knn.hidden_sizes == [32, 32]
        assert knn.dataset.split_seed == 11

        sweep = load_experiment_file(str(EXPERIMENTS_DIR / 'two_gaussians_sweep.ini'))
        assert len(sweep.sweep) == 12
        assert sweep.experiment.batch_size == 128 and sweep.experiment.lr == 0.001

        theory = load_experiment_file(str(EXPERIMENTS_DIR / 'theory_beta.ini')).theory
        assert theory.schedule == 'linear' and theory.n_grid == [2000, 8000, 32000, 64000]

    def test_method_defaults_fill_in(self, experiment_file):
        path = experiment_file("[dataset]\nsplit_seed = 1\n\n[method]\nname = codistill\na = 0.2\n")
        method = load_experiment_file(path).experiment.method
        assert method.params == {'a': 0.2, 'psi': 'ce', 'n_warm': 100}

    @pytest.mark.parametrize('body', [
        "[dataset]\nsplit_seed = 1\n[method]\nname = dropout\n",
        "[dataset]\nsplit_seed = 1\n[method]\nname = knn_ls\nradius = 2\n",
        "[dataset]\nsplit_seed = 1\n[method]\nname = knn_ls\nk = 2.5\n",
        "[dataset]\n[method]\nname = control\n",
        "[experiment]\nn_runs = 1\n[dataset]\nsplit_seed = 1\n[method]\nname = control\n",
        "[dataset]\nsplit_seed = 1\ncolour = red\n[method]\nname = control\n",
        "[results]\nformat = csv\n",
        "[method]\nk = 3\n",
        "[experiment]\nbase_seed = -3\n[dataset]\nsplit_seed = 1\n[method]\nname = control\n",
        "[experiment]\nprelim_seed = 1.5\n[dataset]\nsplit_seed = 1\n[method]\nname = anchor\n",
        "[dataset]\nsplit_seed = -1\n[method]\nname = control\n",
        "[theory]\nseed = -1\n",
    ])
    def test_invalid_files(self, experiment_file, body):
        with pytest.raises(ConfigurationError):
            load_experiment_file(experiment_file(body))

    def test_sweep_points_follow_declared_order(self):
        grid = SweepGrid({'a': [0.5, 1.0], 'b': [0.0, 0.5, 0.9]})
        points = grid.points()
        assert len(points) == 6
        assert points[:4] == [{'a': 0.5, 'b': 0.0}, {'a': 0.5, 'b': 0.5}, {'a': 0.5, 'b': 0.9}, {'a': 1.0, 'b': 0.0}]

    def test_codistill_warmup_fits_a_shipped_run(self):
        experiment = load_experiment_file(str(EXPERIMENTS_DIR / 'two_gaussians_sweep.ini')).experiment
        n_train = experiment.dataset.n - round(experiment.dataset.test_fraction * experiment.dataset.n)
        steps = experiment.epochs * math.ceil(n_train / experiment.batch_size)
        assert steps == 320
        assert max(SweepGrid.default_for('codistill').values['n_warm']) < steps
        assert BaselineSpec('codistill').params['n_warm'] < steps

    def test_default_grids(self):
        assert len(SweepGrid.default_for('knn_ls')) == 4 * 9 * 5
        assert SweepGrid.default_for('bitempered').values['t2'] == [1.0, 2.0, 3.0, 4.0]
        with pytest.raises(ConfigurationError):
            SweepGrid({'a': []})


class TestTrainAndPredict:

    @pytest.mark.parametrize('method', [
        BaselineSpec('control'),
        BaselineSpec('lp_reg', {'a': 0.01, 'p': 1}),
        BaselineSpec('anchor', {'a': 0.5}),
        BaselineSpec('codistill', {'a': 0.5, 'psi': 'kl', 'n_warm': 2}),
        BaselineSpec('bitempered', {'t1': 0.7, 't2': 2.0}),
        BaselineSpec('mixup', {'a': 0.2}),
        BaselineSpec('ensemble', {'m': 2}),
        BaselineSpec('label_smoothing', {'a': 0.1}),
        BaselineSpec('knn_ls', {'a': 1.0, 'b': 0.5, 'k': 5}),
    ], ids=lambda spec: spec.method)
    def test_every_method(self, method, toy_split, small_train_config):
        train_set, test_set = toy_split
        prelim = None
        if method.method == 'anchor':
            prelim = train(train_set, dataclasses.replace(small_train_config, seed=99))
        classes, probs = train_and_predict(method, train_set, test_set, small_train_config, prelim)
        assert classes.shape == (test_set.n,)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(classes, probs.argmax(axis=1))

    def test_anchor_needs_preliminary_model(self, toy_split, small_train_config):
        train_set, test_set = toy_split
        with pytest.raises(ConfigurationError):
            train_and_predict(BaselineSpec('anchor'), train_set, test_set, small_train_config)


class TestRunExperiment:

    def test_train_config_carries_the_run_seed(self, small_experiment):
        config = train_config_for(small_experiment, 17)
        assert config.seed == 17
        assert config.prelim_seed == small_experiment.prelim_seed
        assert config.hidden_sizes == [8]

    def test_five_runs_make_ten_pairs(self, small_experiment):
        records, report = ExperimentService().run_experiment(small_experiment)
        assert [record.seed for record in records] == [0, 1, 2, 3, 4]
        assert report.n_runs == 5
        assert report.n_pairs == 10

    def test_knn_smoothing_without_weight_is_control(self, small_experiment):
        config = dataclasses.replace(small_experiment, n_runs=3)
        control = run_setting(config)
        smoothed = run_setting(config.with_method(BaselineSpec('knn_ls', {'a': 0.0, 'b': 0.5, 'k': 5})))
        assert smoothed.report == control.report
        for first, second in zip(control.records, smoothed.records):
            np.testing.assert_array_equal(first.probabilities, second.probabilities)

    def test_repeat_is_byte_identical(self, small_experiment, tmp_path):
        config = dataclasses.replace(small_experiment, n_runs=3,
                                     method=BaselineSpec('knn_ls', {'a': 1.0, 'b': 0.5, 'k': 5}))
        first = ExperimentService(out_dir=str(tmp_path / 'first'))
        second = ExperimentService(out_dir=str(tmp_path / 'second'))
        first_records, _ = first.run_experiment(config)
        second_records, _ = second.run_experiment(config)
        assert Path(first.runs_path).read_bytes() == Path(second.runs_path).read_bytes()
        for a, b in zip(first_records, second_records):
            assert churn(a.predictions, b.predictions) == 0.0

    def test_anchor_runs_share_the_preliminary_model(self, small_experiment):
        config = dataclasses.replace(small_experiment, n_runs=2, method=BaselineSpec('anchor', {'a': 1.0}))
        result = run_setting(config)
        # a = 1 trains every run on the same preliminary targets; only the run seed differs
        assert result.report.n_pairs == 1
        assert len(result.records) == 2

    @pytest.mark.parametrize('field', ['base_seed', 'prelim_seed'])
    def test_negative_seeds_are_rejected(self, small_experiment, field):
        with pytest.raises(ConfigurationError, match=field):
            dataclasses.replace(small_experiment, **{field: -1})

    def test_negative_seed_base(self, small_experiment):
        with pytest.raises(ParameterError):
            run_setting(small_experiment, seed_base=-1)

    def test_largest_seed_parses_exactly(self, experiment_file):
        path = experiment_file(f"[experiment]\nbase_seed = {2 ** 64 - 1}\n[dataset]\nsplit_seed = 1\n"
                               "[method]\nname = control\n")
        assert load_experiment_file(path).experiment.base_seed == 2 ** 64 - 1

    def test_failure_names_the_run(self, small_experiment):
        config = small_experiment.with_method(BaselineSpec('knn_ls', {'k': 10_000}))
        with pytest.raises(ExperimentError, match='run 0'):
            run_setting(config)

    def test_report_rebuilds_from_run_records(self, small_experiment, tmp_path):
        service = ExperimentService(out_dir=str(tmp_path))
        result = service.run_setting(small_experiment)
        rebuilt = results_from_jsonl(service.runs_path)
        assert len(rebuilt) == 1
        assert rebuilt[0].report == result.report
        assert rebuilt[0].fingerprint == result.fingerprint


class TestSweep:

    def _config(self, small_experiment):
        return dataclasses.replace(small_experiment, n_runs=2,
                                   method=BaselineSpec('knn_ls', {'a': 1.0, 'b': 0.5, 'k': 5}))

    def test_product_grid(self, small_experiment):
        grid = SweepGrid({'a': [0.5, 1.0], 'b': [0.0, 0.5, 0.9]})
        reports = ExperimentService().run_sweep(self._config(small_experiment), grid)
        assert [params for params, _ in reports] == [{'a': a, 'b': b, 'k': 5} for a in (0.5, 1.0)
                                                     for b in (0.0, 0.5, 0.9)]
        best_params, _ = select_best(reports)
        assert best_params in [params for params, _ in reports]

    def test_failed_point_is_recorded(self, small_experiment, tmp_path):
        service = ExperimentService(out_dir=str(tmp_path))
        outcome = service.sweep(self._config(small_experiment), SweepGrid({'k': [5, 10_000]}))
        assert [result.hyperparams['k'] for result in outcome.results] == [5]
        assert len(outcome.failures) == 1
        assert outcome.failures[0][0] == {'k': 10_000}
        assert len(results_from_jsonl(service.runs_path)) == 1

    def test_rerun_gives_identical_file(self, small_experiment, tmp_path):
        service = ExperimentService(out_dir=str(tmp_path))
        grid = SweepGrid({'b': [0.0, 0.9]})
        service.sweep(self._config(small_experiment), grid)
        first = Path(service.runs_path).read_bytes()
        service.sweep(self._config(small_experiment), grid)
        assert Path(service.runs_path).read_bytes() == first

    def test_point_seeds_depend_on_coordinates_only(self):
        assert point_seed(0, {'a': 1.0, 'b': 0.5}) == point_seed(0, {'b': 0.5, 'a': 1.0})
        assert point_seed(0, {'a': 1.0, 'b': 0.5}) != point_seed(0, {'a': 1.0, 'b': 0.9})
        assert point_seed(0, {'a': 1.0}) != point_seed(1, {'a': 1.0})

    def test_ablation_sweeps_one_knob(self, small_experiment):
        config = dataclasses.replace(small_experiment, n_runs=2)
        ablations = [({'k': 5, 'a': 1.0}, 'b', [0.0, 0.5]), ({'a': 1.0, 'b': 0.9}, 'k', [3, 5])]
        outcomes = ExperimentService().run_ablation(config, ablations)
        assert [label for label, _ in outcomes] == ['k=5, a=1.0 over b', 'a=1.0, b=0.9 over k']
        assert [result.hyperparams['b'] for result in outcomes[0][1].results] == [0.0, 0.5]
        assert all(result.method == 'knn_ls' for _, outcome in outcomes for result in outcome.results)

    def test_workers_log_at_the_parent_level(self):
        root = logging.getLogger()
        saved_handlers, saved_level = root.handlers[:], root.level
        threads, deterministic = torch.get_num_threads(), torch.are_deterministic_algorithms_enabled()
        try:
            root.handlers.clear()
            root.setLevel(logging.DEBUG)
            initargs = ExperimentService(workers=2).worker_initargs()
            assert initargs == (1, logging.DEBUG, WORKER_LOG_FORMAT)
            _init_worker(*initargs)
            assert len(root.handlers) == 1
            record = logging.LogRecord('services.experiment_service', logging.INFO, __file__, 1, 'point done',
                                       None, None)
            assert str(os.getpid()) in root.handlers[0].format(record)
            assert torch.are_deterministic_algorithms_enabled()
        finally:
            root.handlers[:] = saved_handlers
            root.setLevel(saved_level)
            torch.set_num_threads(threads)
            torch.use_deterministic_algorithms(deterministic)

    def test_invalid_worker_count(self):
        with pytest.raises(ConfigurationError):
            ExperimentService(workers=0)

    @pytest.mark.slow
    def test_parallel_matches_sequential(self, small_experiment, tmp_path):
        grid = SweepGrid({'a': [0.5, 1.0], 'b': [0.0, 0.9]})
        threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            sequential = ExperimentService(workers=1, out_dir=str(tmp_path / 'sequential'))
            sequential.sweep(self._config(small_experiment), grid)
            parallel = ExperimentService(workers=2, out_dir=str(tmp_path / 'parallel'))
            parallel.sweep(self._config(small_experiment), grid)
        finally:
            torch.set_num_threads(threads)
        assert Path(parallel.runs_path).read_bytes() == Path(sequential.runs_path).read_bytes()


@pytest.mark.slow
class TestChurnReduction:

    def test_knn_smoothing_reduces_churn(self):
        """k-NN smoothing churns less than plain training at similar accuracy on most repetitions"""
        wins = 0
        for repetition in range(4):
            base = ExperimentConfig(
                dataset=DatasetSpec(kind='two_gaussians', n=3000, flip_fraction=0.1, seed=100 + repetition,
                                    test_fraction=1.0 / 3.0, split_seed=200 + repetition),
                method=BaselineSpec('control'),
                hidden_sizes=[32, 32],
                n_runs=5,
                base_seed=1000 * repetition
            )
            data = load_split(base.dataset)
            assert (data[0].n, data[1].n) == (2000, 1000)
            control = run_setting(base, split=data).report
            smoothed = run_setting(base.with_method(BaselineSpec('knn_ls', {'k': 10, 'a': 1.0, 'b': 0.5})),
                                   split=data).report
            if smoothed.churn_mean < control.churn_mean and \
                    abs(smoothed.accuracy_mean - control.accuracy_mean) <= 1.0:
                wins += 1
        assert wins >= 3

