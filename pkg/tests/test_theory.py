import math

import numpy as np
import pytest

from errors import ParameterError
from models.dataset import Dataset
from services.theory import (MAX_GRID_POINTS, beta_smoothed_oracle, evaluation_grid, fit_slope, linear_k_schedule,
                             make_mixture_problem, make_problem, minimax_k_schedule, rate_experiment,
                             resolve_eta, sample_dataset, smoothed_bound, sup_error_estimate, uniform_bound,
                             uniform_k_range, unit_ball_volume)


def _direct_uniform_bound(k, n, dim, alpha, c_alpha, omega, p_x0, delta):
    volume = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1)
    return (c_alpha * (2 * k / (omega * volume * n * p_x0)) ** (alpha / dim)
            + math.sqrt((2 * math.log(4 * dim / delta) + 2 * dim * math.log(n)) / k))


class TestUnitBallVolume:

    def test_known_volumes(self):
        assert unit_ball_volume(1) == pytest.approx(2.0, abs=1e-12)
        assert unit_ball_volume(2) == pytest.approx(math.pi, abs=1e-12)
        assert unit_ball_volume(3) == pytest.approx(4.0 * math.pi / 3.0, abs=1e-12)

    @pytest.mark.parametrize('dim', [0, -1, 1.5])
    def test_invalid_dimension(self, dim):
        with pytest.raises(ParameterError):
            unit_ball_volume(dim)


class TestUniformBound:

    @pytest.mark.parametrize('k, expected', [(100, 0.5314), (400, 0.3007)])
    def test_hand_values(self, k, expected):
        value, _ = uniform_bound(k, 10_000, 1, 1.0, 1.0, 1.0, 1.0, 1.0, 0.05)
        assert value == pytest.approx(expected, abs=5e-4)
        assert abs(value - _direct_uniform_bound(k, 10_000, 1, 1.0, 1.0, 1.0, 1.0, 0.05)) < 1e-9

    def test_bias_term(self):
        value, _ = uniform_bound(100, 10_000, 1, 1.0, 1.0, 1.0, 1.0, 1.0, 0.05)
        variance = math.sqrt((2 * math.log(80.0) + 2 * math.log(10_000)) / 100)
        assert value - variance == pytest.approx(0.01, abs=1e-12)

    def test_admissible_range_is_large(self):
        low, high = uniform_k_range(10_000, 1, 1.0, 1.0, 1.0, 0.05)
        assert low == pytest.approx(256 * math.log(80.0) ** 2 * math.log(10_000))
        assert low > 4.4e4
        assert high == pytest.approx(1e4)
        _, valid = uniform_bound(100, 10_000, 1, 1.0, 1.0, 1.0, 1.0, 1.0, 0.05)
        assert valid is False

    def test_inside_the_range(self):
        _, valid = uniform_bound(20_000, 100_000, 1, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5)
        assert valid is True

    @pytest.mark.parametrize('overrides', [{'k': 0}, {'c_alpha': 0.0}, {'omega': -1.0}, {'delta': 1.0},
                                           {'delta': 0.0}, {'p_x0': 0.0}])
    def test_invalid_constants(self, overrides):
        arguments = dict(k=100, n=10_000, dim=1, alpha=1.0, c_alpha=1.0, omega=1.0, p_x0=1.0, r0=1.0, delta=0.05)
        arguments.update(overrides)
        with pytest.raises(ParameterError):
            uniform_bound(**arguments)


class TestSmoothedBound:

    def test_hand_value(self):
        value = smoothed_bound(10_000, 2, 0.1, 0.05)
        assert value == pytest.approx(0.650, abs=1e-3)
        assert value == pytest.approx(3.0 * math.sqrt((2 * math.log(160.0) + 4 * math.log(10_000)) / 1000.0),
                                      abs=1e-12)

    def test_decreasing_in_beta(self):
        values = [smoothed_bound(10_000, 2, beta, 0.05) for beta in (0.05, 0.1, 0.3, 0.6, 0.9)]
        assert all(later < earlier for earlier, later in zip(values, values[1:]))

    def test_quadrupling_n_roughly_halves(self):
        ratio = smoothed_bound(40_000, 2, 0.1, 0.05) / smoothed_bound(10_000, 2, 0.1, 0.05)
        assert 0.5 < ratio < 0.6

    @pytest.mark.parametrize('beta, delta', [(0.0, 0.05), (1.0, 0.05), (0.1, 1.5)])
    def test_parameter_ranges(self, beta, delta):
        with pytest.raises(ParameterError):
            smoothed_bound(10_000, 2, beta, delta)


class TestSyntheticProblems:

    @pytest.mark.parametrize('name', ['linear', 'sine', 'quadratic', 'constant'])
    @pytest.mark.parametrize('dim', [1, 2, 3])
    def test_holder_constants_hold(self, name, dim, rng):
        problem = make_problem(name, dim)
        assert problem.holder_ratio(5_000, rng) <= 1.0 + 1e-9

    def test_eta_in_unit_interval(self, rng):
        for name in ('linear', 'sine', 'quadratic'):
            values = make_problem(name, 2).eta(rng.random((1000, 2)))
            assert np.all((values >= 0) & (values <= 1))

    def test_constant_eta(self):
        assert resolve_eta('constant:0.3')(np.array([[0.1], [0.9]])).tolist() == [0.3, 0.3]
        with pytest.raises(ParameterError):
            resolve_eta('constant:1.5')
        with pytest.raises(ParameterError):
            resolve_eta('cubic')

    def test_sampled_labels_follow_eta(self):
        problem = make_problem('linear', 1)
        dataset = sample_dataset(problem, 20_000, np.random.default_rng(3))
        assert dataset.soft_labels[:, 0].mean() == pytest.approx(0.5, abs=0.02)
        np.testing.assert_array_equal(dataset.hard_labels, dataset.soft_labels.argmax(axis=1))

    def test_mixture_problem(self, rng):
        problem = make_mixture_problem('linear', [[0.25, 0.25], [0.75, 0.75]], scale=0.1)
        points = problem.sample_points(500, rng)
        assert points.shape == (500, 2)
        grid = evaluation_grid(problem, 64)
        assert grid.shape == (64 * 64, 2)
        np.testing.assert_allclose(grid.min(axis=0), [0.05, 0.05])


class TestEvaluationGrid:

    def test_resolution_per_dimension(self):
        assert evaluation_grid(make_problem('linear', 1)).shape == (512, 1)
        assert evaluation_grid(make_problem('linear', 2)).shape == (64 * 64, 2)
        assert evaluation_grid(make_problem('linear', 3)).shape[0] <= MAX_GRID_POINTS

    def test_covers_the_cube(self):
        grid = evaluation_grid(make_problem('sine', 2), 8)
        np.testing.assert_array_equal(grid.min(axis=0), [0.0, 0.0])
        np.testing.assert_array_equal(grid.max(axis=0), [1.0, 1.0])


class TestSupErrorEstimate:

    def test_constant_soft_labels(self):
        problem = make_problem('constant:0.3', 1)
        sample = Dataset(features=np.linspace(0, 1, 50)[:, None], soft_labels=np.tile([0.3, 0.7], (50, 1)))
        grid = evaluation_grid(problem, 32)
        for k in (1, 7, 50):
            assert sup_error_estimate(problem, sample, k, grid) == pytest.approx(0.0, abs=1e-12)

    def test_hand_enumeration(self):
        problem = make_problem('linear', 1)
        x = np.array([0.1, 0.5, 0.9])
        sample = Dataset(features=x[:, None], soft_labels=np.column_stack([x, 1.0 - x]))
        error = sup_error_estimate(problem, sample, 1, [[0.0], [0.5], [1.0]])
        assert error == pytest.approx(0.1, abs=1e-12)

    def test_k_larger_than_sample(self):
        problem = make_problem('linear', 1)
        sample = sample_dataset(problem, 10, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            sup_error_estimate(problem, sample, 11, evaluation_grid(problem, 16))

    @pytest.mark.slow
    def test_minimax_k_is_accurate(self):
        problem = make_problem('linear', 1)
        grid = evaluation_grid(problem)
        k = minimax_k_schedule(1.0, 1)(10_000)
        errors = [sup_error_estimate(problem, sample_dataset(problem, 10_000, np.random.default_rng([5, trial])),
                                     k, grid) for trial in range(20)]
        assert sum(error < 0.1 for error in errors) >= 18

    @pytest.mark.slow
    def test_uniform_bound_coverage(self):
        problem = make_problem('linear', 1)
        grid = evaluation_grid(problem)
        bound, valid = uniform_bound(20_000, 100_000, 1, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5)
        assert valid
        covered = 0
        for trial in range(10):
            sample = sample_dataset(problem, 100_000, np.random.default_rng([11, trial]))
            covered += sup_error_estimate(problem, sample, 20_000, grid) <= bound
        assert covered >= 9


class TestBetaSmoothedOracle:

    def test_symmetric_linear(self):
        value = beta_smoothed_oracle(0.5, 0.2, make_problem('linear', 1))
        assert value[0] == pytest.approx(0.5, abs=1e-12)

    def test_quadratic_integral(self):
        value = beta_smoothed_oracle(0.5, 0.2, make_problem('quadratic', 1))
        assert value[0] == pytest.approx(0.76 / 3.0, abs=1e-10)

    def test_whole_support_is_the_mean(self):
        problem = make_problem('quadratic', 1)
        values = beta_smoothed_oracle(np.array([0.0, 0.2, 0.9]), 1.0, problem)
        np.testing.assert_allclose(values, 1.0 / 3.0, atol=1e-10)

    def test_monte_carlo_tracks_closed_form(self):
        problem = make_problem('quadratic', 1)
        x = np.linspace(0.0, 1.0, 300)
        closed = beta_smoothed_oracle(x, 0.2, problem, method='closed_form')
        sampled = beta_smoothed_oracle(x, 0.2, problem, oracle_sample_size=100_000, seed=4, method='monte_carlo')
        assert np.max(np.abs(sampled - closed)) < 0.02

    @pytest.mark.slow
    def test_monte_carlo_matches_closed_form(self):
        problem = make_problem('quadratic', 1)
        x = np.random.default_rng(11).random(500)
        closed = beta_smoothed_oracle(x, 0.2, problem, method='closed_form')
        sampled = beta_smoothed_oracle(x, 0.2, problem, oracle_sample_size=1_000_000, seed=4,
                                       method='monte_carlo')
        np.testing.assert_allclose(sampled, closed, atol=0.01)

    def test_two_dimensional_monte_carlo(self):
        problem = make_problem('linear', 2)
        value = beta_smoothed_oracle([0.5, 0.5], 0.1, problem, oracle_sample_size=50_000)
        assert value[0] == pytest.approx(0.5, abs=0.01)

    @pytest.mark.parametrize('beta', [0.0, -0.2, 1.5])
    def test_beta_range(self, beta):
        with pytest.raises(ParameterError):
            beta_smoothed_oracle(0.5, beta, make_problem('linear', 1))

    def test_closed_form_needs_one_dimension(self):
        with pytest.raises(ParameterError):
            beta_smoothed_oracle([0.5, 0.5], 0.1, make_problem('linear', 2), method='closed_form')


class TestKSchedules:

    def test_minimax(self):
        schedule = minimax_k_schedule(1.0, 1)
        assert schedule(1000) == 100
        assert schedule(64_000) == 1600

    def test_linear(self):
        schedule = linear_k_schedule(0.1)
        assert schedule(2000) == 200
        assert schedule(5) == 1
        assert linear_k_schedule(1.0)(300) == 300


class TestRateExperiment:

    def test_deterministic_in_seed(self):
        problem = make_problem('sine', 1)
        kwargs = dict(n_grid=[200, 400, 800], trials=3, seed=21, grid_resolution=64)
        first = rate_experiment(problem, minimax_k_schedule(1.0, 1), **kwargs)
        second = rate_experiment(problem, minimax_k_schedule(1.0, 1), **kwargs)
        assert first == second
        assert len(first.errors) == 3 and len(first.errors[0]) == 3
        assert all(error >= 0 for error in first.mean_errors)
        assert math.isfinite(first.slope)

    def test_threads_match_sequential(self):
        problem = make_problem('linear', 1)
        kwargs = dict(n_grid=[200, 400], trials=4, seed=8, grid_resolution=32)
        sequential = rate_experiment(problem, minimax_k_schedule(1.0, 1), **kwargs)
        threaded = rate_experiment(problem, minimax_k_schedule(1.0, 1), workers=3, **kwargs)
        assert sequential == threaded

    def test_full_neighborhood_plateaus(self):
        problem = make_problem('linear', 1)
        result = rate_experiment(problem, linear_k_schedule(1.0), n_grid=[200, 800, 3200], trials=3, seed=2,
                                 compare_to='eta', grid_resolution=64)
        assert all(error >= 0.5 - 1e-12 for error in result.mean_errors)
        assert abs(result.slope) < 0.1

    def test_gaussian_mixture(self):
        problem = make_mixture_problem('linear', [[0.25, 0.25], [0.75, 0.75]], scale=0.1)
        result = rate_experiment(problem, minimax_k_schedule(1.0, 2), n_grid=[200, 800], trials=3, seed=5,
                                 grid_resolution=16)
        assert result.compare_to == 'eta'
        assert all(0.0 <= error <= 1.0 for error in result.mean_errors)
        assert math.isfinite(result.slope)

    def test_frame_columns(self):
        result = rate_experiment(make_problem('linear', 1), linear_k_schedule(0.2), n_grid=[100, 200], trials=3,
                                 seed=0, grid_resolution=16)
        assert result.compare_to == 'beta'
        assert list(result.to_frame().columns) == ['n', 'mean_error', 'std_error', 'bound']

    @pytest.mark.parametrize('n_grid, trials', [([100], 3), ([200, 100], 3), ([100, 100], 3), ([100, 200], 2)])
    def test_degenerate_settings(self, n_grid, trials):
        with pytest.raises(ParameterError):
            rate_experiment(make_problem('linear', 1), minimax_k_schedule(1.0, 1), n_grid, trials, seed=0)

    def test_negative_seed(self):
        with pytest.raises(ParameterError):
            rate_experiment(make_problem('linear', 1), minimax_k_schedule(1.0, 1), [100, 200], 3, seed=-1)

    def test_unknown_target(self):
        with pytest.raises(ParameterError):
            rate_experiment(make_problem('linear', 1), minimax_k_schedule(1.0, 1), [100, 200], 3, seed=0,
                            compare_to='median')

    def test_fit_slope(self):
        sizes = [1000, 4000, 16000]
        assert fit_slope(sizes, [n ** -0.5 for n in sizes]) == pytest.approx(-0.5)

    @pytest.mark.slow
    def test_minimax_rate(self):
        result = rate_experiment(make_problem('linear', 1), minimax_k_schedule(1.0, 1),
                                 [1000, 4000, 16000, 64000], trials=5, seed=1)
        assert result.slope == pytest.approx(-1.0 / 3.0, abs=0.15)
        assert all(error <= bound for error, bound in zip(result.mean_errors, result.bounds))

    @pytest.mark.slow
    def test_linear_schedule_rate(self):
        result = rate_experiment(make_problem('quadratic', 1), linear_k_schedule(0.1),
                                 [2000, 8000, 32000, 64000], trials=5, seed=1)
        assert result.compare_to == 'beta'
        assert -0.7 <= result.slope <= -0.3
