"""Convergence checks for k-NN labels: explicit bounds, oracles and rate experiments.

Binary setting throughout. Label component 0 is the event Y = 1, so the first
component of a k-NN label estimates eta(x) = P(Y = 1 | X = x). All logarithms
are natural.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, special

from errors import NumericError, ParameterError
from models.dataset import Dataset
from services.label_smoothing import _as_points, _check_k, _distance_chunks, knn_labels
from services.seeding import check_seed

logger = logging.getLogger(__name__)

# Cap on evaluation-grid size: 512 points in 1-D, 64^2 in 2-D, 16^3 in 3-D
MAX_GRID_POINTS = 4096
DEFAULT_ORACLE_SAMPLE_SIZE = 200_000

EtaFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EtaSpec:
    """A label function of the clipped mean coordinate with its Hoelder constants"""
    name: str
    profile: Callable[[np.ndarray], np.ndarray]
    alpha: float
    # Hoelder constant of the profile; divided by sqrt(D) for the mean coordinate
    profile_constant: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        return self.profile(np.clip(points.mean(axis=1), 0.0, 1.0))

    def c_alpha(self, dim: int) -> float:
        return self.profile_constant / math.sqrt(dim)


def _constant_eta(value: float) -> EtaSpec:
    if not 0.0 <= value <= 1.0:
        raise ParameterError(f"constant eta must be in [0, 1], got {value}")
    return EtaSpec(f"constant:{value:g}", lambda t: np.full_like(t, value), 1.0, 0.0)


ETA_SPECS = {
    'linear': EtaSpec('linear', lambda t: t, 1.0, 1.0),
    'sine': EtaSpec('sine', lambda t: (1.0 + np.sin(2.0 * np.pi * t)) / 2.0, 1.0, math.pi),
    'quadratic': EtaSpec('quadratic', lambda t: t ** 2, 1.0, 2.0),
}


def resolve_eta(eta_spec) -> EtaSpec:
    """'linear', 'sine', 'quadratic', 'constant' (0.5) or 'constant:<value>'"""
    if isinstance(eta_spec, EtaSpec):
        return eta_spec
    name = str(eta_spec).strip()
    if name == 'constant':
        return _constant_eta(0.5)
    if name.startswith('constant:'):
        try:
            return _constant_eta(float(name.split(':', 1)[1]))
        except ValueError:
            raise ParameterError(f"Bad constant eta '{name}'")
    if name not in ETA_SPECS:
        raise ParameterError(f"Unknown eta '{name}', expected one of constant, {', '.join(ETA_SPECS)}")
    return ETA_SPECS[name]


@dataclass
class SyntheticProblem:
    """
    Density, label function and the regularity constants a bound needs.
    density is 'uniform' (unit cube) or 'gaussian_mixture' (means, scale, weights).
    """
    dimension: int
    eta: EtaFn
    alpha: float
    c_alpha: float
    omega: float
    r0: float
    p_x0: float
    density: str = 'uniform'
    means: Optional[np.ndarray] = None
    scale: float = 1.0
    weights: Optional[np.ndarray] = None
    name: str = 'problem'

    def __post_init__(self):
        if self.dimension < 1:
            raise ParameterError(f"dimension must be >= 1, got {self.dimension}")
        if self.density not in ('uniform', 'gaussian_mixture'):
            raise ParameterError(f"Unknown density '{self.density}'")
        if self.density == 'gaussian_mixture':
            if self.means is None:
                raise ParameterError("A Gaussian mixture needs component means")
            self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
            if self.means.shape[1] != self.dimension:
                raise ParameterError(f"means have width {self.means.shape[1]}, expected {self.dimension}")
            count = self.means.shape[0]
            weights = np.full(count, 1.0 / count) if self.weights is None else np.asarray(self.weights, float)
            if weights.shape != (count,) or np.any(weights < 0) or not math.isclose(weights.sum(), 1.0):
                raise ParameterError("mixture weights must be a probability vector over the components")
            self.weights = weights
            if self.scale <= 0:
                raise ParameterError(f"scale must be > 0, got {self.scale}")

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.density == 'uniform':
            return rng.random((n, self.dimension))
        components = rng.choice(self.means.shape[0], size=n, p=self.weights)
        return self.means[components] + self.scale * rng.standard_normal((n, self.dimension))

    def holder_ratio(self, n_pairs: int, rng: np.random.Generator) -> float:
        """Largest |eta(x) - eta(x')| / (C_alpha |x - x'|^alpha) over random pairs; <= 1 when the constants hold"""
        first = self.sample_points(n_pairs, rng)
        second = self.sample_points(n_pairs, rng)
        gaps = np.abs(self.eta(first) - self.eta(second))
        if self.c_alpha == 0:
            return 0.0 if np.all(gaps == 0) else math.inf
        scale = self.c_alpha * np.linalg.norm(first - second, axis=1) ** self.alpha
        return float(np.max(gaps / np.maximum(scale, np.finfo(float).tiny)))


def make_problem(eta_spec, dim: int) -> SyntheticProblem:
    """Uniform density on [0, 1]^D; omega = 2^-D (cube corners), r0 = 1, p_X0 = 1"""
    spec = resolve_eta(eta_spec)
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    return SyntheticProblem(dimension=dim, eta=spec, alpha=spec.alpha, c_alpha=spec.c_alpha(dim),
                            omega=2.0 ** -dim, r0=1.0, p_x0=1.0, name=f"{spec.name}_d{dim}")


def make_mixture_problem(eta_spec, means, scale: float = 0.25, weights=None) -> SyntheticProblem:
    """
    Gaussian-mixture density; support is unbounded, so the density floor and
    support constants are nominal (p_X0 taken at two scales from a mean)
    """
    spec = resolve_eta(eta_spec)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    dim = means.shape[1]
    floor = math.exp(-2.0) / ((2.0 * math.pi) ** (dim / 2) * scale ** dim) / means.shape[0]
    return SyntheticProblem(dimension=dim, eta=spec, alpha=spec.alpha, c_alpha=spec.c_alpha(dim),
                            omega=2.0 ** -dim, r0=scale, p_x0=floor, density='gaussian_mixture',
                            means=means, scale=scale, weights=weights, name=f"{spec.name}_mix_d{dim}")


def sample_dataset(problem: SyntheticProblem, n: int, rng: np.random.Generator) -> Dataset:
    """n points from the density with one-hot Bernoulli(eta) labels"""
    features = problem.sample_points(n, rng)
    eta = problem.eta(features)
    positive = rng.random(n) < eta
    hard = np.where(positive, 0, 1)
    soft = np.column_stack([positive, ~positive]).astype(np.float64)
    return Dataset(features=features, soft_labels=soft, hard_labels=hard, name=problem.name,
                   metadata={'class_names': ['positive', 'negative'], 'eta': eta})


def unit_ball_volume(dim: int) -> float:
    """pi^(D/2) / Gamma(D/2 + 1)"""
    if dim < 1 or int(dim) != dim:
        raise ParameterError(f"dimension must be an integer >= 1, got {dim}")
    return math.exp(dim / 2.0 * math.log(math.pi) - special.gammaln(dim / 2.0 + 1.0))


def _require_positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise ParameterError(f"{name} must be > 0, got {value}")


def _require_delta(delta: float):
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")


def uniform_k_range(n: int, dim: int, omega: float, p_x0: float, r0: float, delta: float) -> Tuple[float, float]:
    """Admissible k for the uniform bound: [256 D ln^2(4/delta) ln n, omega p_X0 v_D r0^D n / 2]"""
    low = 256.0 * dim * math.log(4.0 / delta) ** 2 * math.log(n)
    high = 0.5 * omega * p_x0 * unit_ball_volume(dim) * r0 ** dim * n
    return low, high


def uniform_bound(k: int, n: int, dim: int, alpha: float, c_alpha: float, omega: float, p_x0: float,
                   r0: float, delta: float) -> Tuple[float, bool]:
    """
    Uniform k-NN label error bound
        C_alpha (2k / (omega v_D n p_X0))^(alpha/D) + sqrt((2 ln(4D/delta) + 2D ln n) / k)
    Returns:
        (bound, whether k lies in the admissible range); the bound is evaluated either way
    """
    _require_positive(k=k, n=n, dim=dim, alpha=alpha, c_alpha=c_alpha, omega=omega, p_x0=p_x0, r0=r0)
    _require_delta(delta)
    bias = c_alpha * (2.0 * k / (omega * unit_ball_volume(dim) * n * p_x0)) ** (alpha / dim)
    variance = math.sqrt((2.0 * math.log(4.0 * dim / delta) + 2.0 * dim * math.log(n)) / k)
    low, high = uniform_k_range(n, dim, omega, p_x0, r0, delta)
    return bias + variance, bool(low <= k <= high)


def smoothed_bound(n: int, dim: int, beta: float, delta: float) -> float:
    """3 sqrt((2 ln(4D/delta) + 2D ln n) / (beta n))"""
    _require_positive(n=n, dim=dim)
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must be in (0, 1), got {beta}")
    _require_delta(delta)
    return 3.0 * math.sqrt((2.0 * math.log(4.0 * dim / delta) + 2.0 * dim * math.log(n)) / (beta * n))


def evaluation_grid(problem: SyntheticProblem, resolution: int = 512) -> np.ndarray:
    """
    Regular grid standing in for the support when approximating a supremum
    Args:
        resolution: points per axis, capped so the grid holds at most MAX_GRID_POINTS
    Returns:
        (m, D) grid over the unit cube, or over means +/- 2 scales for a mixture
    """
    if resolution < 2:
        raise ParameterError(f"grid resolution must be >= 2, got {resolution}")
    dim = problem.dimension
    per_axis = min(resolution, max(2, int(math.floor(MAX_GRID_POINTS ** (1.0 / dim) + 1e-9))))
    if problem.density == 'uniform':
        low, high = np.zeros(dim), np.ones(dim)
    else:
        low = problem.means.min(axis=0) - 2.0 * problem.scale
        high = problem.means.max(axis=0) + 2.0 * problem.scale
    axes = [np.linspace(low[d], high[d], per_axis) for d in range(dim)]
    return np.stack([axis.ravel() for axis in np.meshgrid(*axes, indexing='ij')], axis=1)


def sup_error_estimate(problem: SyntheticProblem, sample: Dataset, k: int, eval_grid,
                       target: Optional[np.ndarray] = None) -> float:
    """
    max over the grid of |first component of the k-NN label - target|
    Args:
        sample: labelled points (hard one-hot draws, or exact soft labels)
        target: values to compare against on the grid; eta on the grid by default
    """
    grid = _as_points(eval_grid)
    _check_k(k, sample.n)
    if target is None:
        target = problem.eta(grid)
    estimate = knn_labels(grid, sample.features, sample.soft_labels, k)[:, 0]
    return float(np.max(np.abs(estimate - np.asarray(target, dtype=np.float64))))


def beta_interval_1d(x: np.ndarray, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Smallest centered ball of mass beta under the uniform law on [0, 1], clipped to the support"""
    x = np.asarray(x, dtype=np.float64)
    low = np.clip(x - beta / 2.0, 0.0, 1.0 - beta)
    return low, low + beta


def beta_radius_1d(x, beta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    low, high = beta_interval_1d(x, beta)
    return np.maximum(x - low, high - x)


def _check_beta(beta: float):
    if not 0.0 < beta <= 1.0:
        raise ParameterError(f"beta must be in (0, 1], got {beta}")


def _oracle_closed_form(points: np.ndarray, beta: float, problem: SyntheticProblem) -> np.ndarray:
    lows, highs = beta_interval_1d(points[:, 0], beta)

    def eta_scalar(t: float) -> float:
        return float(problem.eta(np.array([[t]]))[0])

    values = [integrate.quad(eta_scalar, low, high, epsabs=1e-12, epsrel=1e-10)[0] / beta
              for low, high in zip(lows, highs)]
    return np.asarray(values)


def _oracle_monte_carlo(points: np.ndarray, beta: float, problem: SyntheticProblem, sample_size: int,
                        seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    reference = problem.sample_points(sample_size, rng)
    eta_values = problem.eta(reference)
    m = min(sample_size, max(1, math.ceil(beta * sample_size)))
    result = np.empty(points.shape[0])
    for rows, distances in _distance_chunks(points, reference):
        nearest = np.argpartition(distances, m - 1, axis=1)[:, :m]
        result[rows] = eta_values[nearest].mean(axis=1)
    return result


def beta_smoothed_oracle(x, beta: float, problem: SyntheticProblem, oracle_sample_size: Optional[int] = None,
                         seed: int = 0, method: str = 'auto') -> np.ndarray:
    """
    Average of eta over the smallest ball around x holding probability mass beta
    Args:
        x: (m, D) query points (a scalar or a 1-D array in 1-D)
        oracle_sample_size: Monte Carlo draws from the density
        method: 'closed_form' (1-D uniform only), 'monte_carlo', or 'auto'
                (closed form where available)
    Returns:
        (m,) smoothed label values
    """
    _check_beta(beta)
    points = np.asarray(x, dtype=np.float64)
    if points.ndim == 0:
        points = points.reshape(1, 1)
    elif points.ndim == 1:
        points = points[:, None] if problem.dimension == 1 else points[None, :]
    closed_form_ok = problem.dimension == 1 and problem.density == 'uniform'
    if method == 'auto':
        method = 'closed_form' if closed_form_ok else 'monte_carlo'
    if method == 'closed_form':
        if not closed_form_ok:
            raise ParameterError("The closed-form oracle needs a 1-D uniform density")
        return _oracle_closed_form(points, beta, problem)
    if method != 'monte_carlo':
        raise ParameterError(f"Unknown oracle method '{method}'")
    return _oracle_monte_carlo(points, beta, problem, oracle_sample_size or DEFAULT_ORACLE_SAMPLE_SIZE, seed)


@dataclass(frozen=True)
class KSchedule:
    """k as a function of n: 'minimax' ceil(n^(2 alpha / (2 alpha + D))) or 'linear' floor(beta n)"""
    kind: str
    alpha: float = 1.0
    dim: int = 1
    beta: float = 0.1

    def __call__(self, n: int) -> int:
        if self.kind == 'minimax':
            return min(n, max(1, math.ceil(n ** (2.0 * self.alpha / (2.0 * self.alpha + self.dim)) - 1e-9)))
        return min(n, max(1, math.floor(self.beta * n + 1e-9)))


def minimax_k_schedule(alpha: float, dim: int) -> KSchedule:
    _require_positive(alpha=alpha, dim=dim)
    return KSchedule('minimax', alpha=alpha, dim=dim)


def linear_k_schedule(beta: float) -> KSchedule:
    _check_beta(beta)
    return KSchedule('linear', beta=beta)


@dataclass
class RateResult:
    """Per-n sup-error summary of a rate experiment and its log-log slope"""
    sample_sizes: List[int]
    mean_errors: List[float]
    std_errors: List[float]
    bounds: List[float]
    k_values: List[int]
    slope: float
    trials: int
    seed: int
    grid_resolution: int
    compare_to: str = 'eta'
    errors: List[List[float]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'n': self.sample_sizes, 'mean_error': self.mean_errors,
                             'std_error': self.std_errors, 'bound': self.bounds})


def fit_slope(sample_sizes: Sequence[int], errors: Sequence[float]) -> float:
    """Least-squares slope of log error against log n"""
    with np.errstate(divide='ignore'):
        slope = np.polyfit(np.log(np.asarray(sample_sizes, float)), np.log(np.asarray(errors, float)), 1)[0]
    if not np.isfinite(slope):
        raise NumericError("Rate slope is not finite (a zero error on the grid?)")
    return float(slope)


def _schedule_bound(problem: SyntheticProblem, schedule: KSchedule, n: int, k: int, delta: float) -> float:
    if schedule.kind == 'linear':
        return smoothed_bound(n, problem.dimension, schedule.beta, delta) if schedule.beta < 1 else math.nan
    if problem.c_alpha == 0:
        # No bias term; only the concentration part applies
        return math.sqrt((2.0 * math.log(4.0 * problem.dimension / delta)
                          + 2.0 * problem.dimension * math.log(n)) / k)
    return uniform_bound(k, n, problem.dimension, problem.alpha, problem.c_alpha, problem.omega,
                          problem.p_x0, problem.r0, delta)[0]


def rate_experiment(problem: SyntheticProblem, k_schedule: KSchedule, n_grid: Sequence[int], trials: int,
                    seed: int, compare_to: Optional[str] = None, delta: float = 0.05,
                    grid_resolution: int = 512, workers: int = 1,
                    oracle_sample_size: Optional[int] = None) -> RateResult:
    """
    Monte Carlo sup-error of the k-NN label across sample sizes
    Args:
        k_schedule: k as a function of n
        n_grid: strictly increasing sample sizes (at least two)
        trials: independent samples per n, >= 3
        compare_to: 'eta' or 'beta' (the beta-smoothed oracle); defaults to
                    'beta' for a linear schedule, 'eta' otherwise
        workers: threads running trials concurrently
    Returns:
        RateResult; each trial draws from default_rng([seed, n, trial])
    """
    sizes = [int(n) for n in n_grid]
    if len(sizes) < 2 or any(n < 1 for n in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ParameterError(f"n_grid must hold at least two strictly increasing sizes, got {list(n_grid)}")
    if trials < 3:
        raise ParameterError(f"trials must be >= 3, got {trials}")
    seed = check_seed(seed)
    compare_to = compare_to or ('beta' if k_schedule.kind == 'linear' else 'eta')
    if compare_to not in ('eta', 'beta'):
        raise ParameterError(f"compare_to must be 'eta' or 'beta', got {compare_to}")
    _require_delta(delta)

    grid = evaluation_grid(problem, grid_resolution)
    if compare_to == 'beta':
        beta = k_schedule.beta if k_schedule.kind == 'linear' else 1.0
        target = beta_smoothed_oracle(grid, beta, problem, oracle_sample_size, seed=seed)
    else:
        target = problem.eta(grid)

    k_values = [k_schedule(n) for n in sizes]
    logger.info(f"Rate experiment on {problem.name}: n={sizes}, k={k_values}, {trials} trials, "
                f"{grid.shape[0]} grid points, target={compare_to}")

    def run_trial(task: Tuple[int, int]) -> float:
        position, trial = task
        n = sizes[position]
        rng = np.random.default_rng([seed, n, trial])
        return sup_error_estimate(problem, sample_dataset(problem, n, rng), k_values[position], grid, target)

    tasks = [(position, trial) for position in range(len(sizes)) for trial in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run_trial, tasks))
    else:
        outcomes = [run_trial(task) for task in tasks]

    errors = np.asarray(outcomes).reshape(len(sizes), trials)
    mean_errors = errors.mean(axis=1)
    for n, k, error in zip(sizes, k_values, mean_errors):
        logger.info(f"  n={n:>7} k={k:>6} sup error {error:.4f}")

    return RateResult(
        sample_sizes=sizes,
        mean_errors=[float(v) for v in mean_errors],
        std_errors=[float(v) for v in errors.std(axis=1, ddof=1)],
        bounds=[_schedule_bound(problem, k_schedule, n, k, delta) for n, k in zip(sizes, k_values)],
        k_values=k_values,
        slope=fit_slope(sizes, mean_errors),
        trials=trials,
        seed=seed,
        grid_resolution=grid_resolution,
        compare_to=compare_to,
        errors=errors.tolist()
    )
