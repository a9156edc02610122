"""Comparison methods for churn reduction.

Losses act on logits and soft targets so they plug into nn_core.train_step;
label-producing methods return new soft labels; mixup is a batch transform.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from errors import NumericError, ParameterError, ShapeError
from models.dataset import Dataset, check_unit_interval
from models.network import DTYPE, AdamState, Batch, ModelParams, TrainConfig, TrainedModel
from services.nn_core import (LOG_EPS, LossSpec, _check_finite_gradients, forward_logits, init_mlp, minibatches,
                              soft_cross_entropy, softmax_probs, train)

logger = logging.getLogger(__name__)


# l_p output regularization

def lp_reg_loss(logits: torch.Tensor, target: torch.Tensor, a: float, p: int) -> torch.Tensor:
    """Cross-entropy plus a * ||logits||_p, both averaged over rows"""
    if p not in (1, 2):
        raise ParameterError(f"p must be 1 or 2, got {p}")
    if a < 0:
        raise ParameterError(f"a must be >= 0, got {a}")
    logits = torch.as_tensor(logits, dtype=DTYPE)
    penalty = torch.linalg.vector_norm(logits, ord=p, dim=-1).mean()
    return soft_cross_entropy(softmax_probs(logits), target) + a * penalty


@dataclass(frozen=True)
class LpRegLoss(LossSpec):
    a: float
    p: int = 2
    name = 'lp_reg'

    def __post_init__(self):
        if self.p not in (1, 2) or self.a < 0:
            raise ParameterError(f"Invalid l_p regularization a={self.a}, p={self.p}")

    def __call__(self, logits, targets):
        return lp_reg_loss(logits, targets, self.a, self.p)


# Anchor

def anchor_labels(y: np.ndarray, prelim_probs: np.ndarray, a: float) -> np.ndarray:
    """(1 - a) * y + a * prelim_probs"""
    a = check_unit_interval('a', a)
    y = np.asarray(y, dtype=np.float64)
    prelim_probs = np.asarray(prelim_probs, dtype=np.float64)
    if y.shape != prelim_probs.shape:
        raise ShapeError(f"y {y.shape} and prelim_probs {prelim_probs.shape} differ in shape")
    return (1.0 - a) * y + a * prelim_probs


# Mixup

def mixup_batch(batch: Batch, a: float, rng: np.random.Generator,
                lam: Optional[Union[float, np.ndarray]] = None,
                partners: Optional[np.ndarray] = None) -> Batch:
    """
    Convex-combine every row with a random partner row
    Args:
        batch: at least two rows
        a: Beta(a, a) concentration, > 0
        rng: source of the mixing weights and partners (partners drawn with replacement)
        lam, partners: fixed weights / partner indices instead of random draws
    Returns:
        Batch of lam * row + (1 - lam) * partner
    """
    if a <= 0:
        raise ParameterError(f"Mixup concentration must be > 0, got {a}")
    m = len(batch)
    if m < 2:
        raise ParameterError("Mixup needs a batch of at least 2 rows")
    if lam is None:
        lam = rng.beta(a, a, size=m)
    if partners is None:
        partners = rng.integers(0, m, size=m)

    weights = torch.as_tensor(np.broadcast_to(np.asarray(lam, dtype=np.float64), (m,)).copy(), dtype=DTYPE)[:, None]
    partners = torch.as_tensor(np.asarray(partners, dtype=np.int64))
    return Batch(
        features=weights * batch.features + (1.0 - weights) * batch.features[partners],
        targets=weights * batch.targets + (1.0 - weights) * batch.targets[partners]
    )


@dataclass(frozen=True)
class MixupTransform:
    """Picklable batch transform for TrainConfig.batch_transform"""
    a: float

    def __call__(self, batch: Batch, rng: np.random.Generator) -> Batch:
        return mixup_batch(batch, self.a, rng)


# Co-distillation

PSI_TYPES = ('ce', 'kl')


def coupling_divergence(probs1: torch.Tensor, probs2: torch.Tensor, psi_type: str) -> torch.Tensor:
    """Cross-entropy -sum p1 log p2, or KL sum p1 log(p1 / p2), averaged over rows"""
    if psi_type == 'ce':
        return soft_cross_entropy(probs2, probs1)
    if psi_type == 'kl':
        log_ratio = torch.log(torch.clamp(probs1, min=LOG_EPS)) - torch.log(torch.clamp(probs2, min=LOG_EPS))
        return (probs1 * log_ratio).sum(dim=-1).mean()
    raise ParameterError(f"Unknown divergence '{psi_type}', expected one of {PSI_TYPES}")


def codistill_loss(probs1: torch.Tensor, probs2: torch.Tensor, target: torch.Tensor, a: float,
                   psi_type: str, step: int, n_warm: int) -> torch.Tensor:
    """
    CE(f1, y) + CE(f2, y) + a * psi(f1, f2), the coupling off before n_warm steps
    """
    if psi_type not in PSI_TYPES:
        raise ParameterError(f"Unknown divergence '{psi_type}', expected one of {PSI_TYPES}")
    if a < 0 or n_warm < 0:
        raise ParameterError(f"Co-distillation needs a >= 0 and n_warm >= 0, got a={a}, n_warm={n_warm}")
    loss = soft_cross_entropy(probs1, target) + soft_cross_entropy(probs2, target)
    if step < n_warm or a == 0:
        return loss
    return loss + a * coupling_divergence(probs1, probs2, psi_type)


def codistill_step(params1: ModelParams, params2: ModelParams, adam1: AdamState, adam2: AdamState,
                   batch: Batch, a: float, psi_type: str, n_warm: int) -> float:
    """One joint update of both peers; the step index is adam1.step_count"""
    step = adam1.step_count
    adam1.zero_grad()
    adam2.zero_grad()
    probs1 = softmax_probs(forward_logits(params1, batch.features))
    probs2 = softmax_probs(forward_logits(params2, batch.features))
    loss = codistill_loss(probs1, probs2, batch.targets, a, psi_type, step, n_warm)
    if not torch.isfinite(loss):
        raise NumericError(f"Non-finite co-distillation loss at step {step}")
    loss.backward()
    _check_finite_gradients(params1.parameters() + params2.parameters(), step)
    adam1.step()
    adam2.step()
    return float(loss.item())


def train_codistill(dataset: Dataset, train_config: TrainConfig, a: float, psi_type: str,
                    n_warm: int) -> Tuple[TrainedModel, TrainedModel]:
    """
    Train two peers in lockstep on the same minibatches
    Args:
        train_config: seed initializes the first peer and orders minibatches,
                      prelim_seed initializes the second peer
    Returns:
        (first peer, second peer)
    """
    layer_sizes = [dataset.dim, *train_config.hidden_sizes, dataset.n_classes]
    params1 = init_mlp(layer_sizes, train_config.seed)
    params2 = init_mlp(layer_sizes, train_config.prelim_seed)
    adam1 = AdamState.for_params(params1, **train_config.adam_hyperparams())
    adam2 = AdamState.for_params(params2, **train_config.adam_hyperparams())
    targets = torch.as_tensor(dataset.soft_labels, dtype=DTYPE)

    logger.debug(f"Co-distilling {layer_sizes}: a={a}, psi={psi_type}, n_warm={n_warm}")
    loss = None
    for _, batch in minibatches(dataset, targets, train_config, train_config.seed):
        loss = codistill_step(params1, params2, adam1, adam2, batch, a, psi_type, n_warm)
    return (TrainedModel(params=params1, config=train_config, final_loss=loss),
            TrainedModel(params=params2, config=train_config, final_loss=loss))


# Bi-tempered logistic loss

def log_t(u: torch.Tensor, t: float) -> torch.Tensor:
    """Tempered logarithm (u^(1-t) - 1) / (1 - t); natural log at t = 1"""
    if t == 1.0:
        return torch.log(u)
    return (u ** (1.0 - t) - 1.0) / (1.0 - t)


def exp_t(u: torch.Tensor, t: float) -> torch.Tensor:
    """Tempered exponential [1 + (1-t) u]_+^(1/(1-t)); exp at t = 1"""
    if t == 1.0:
        return torch.exp(u)
    return torch.relu(1.0 + (1.0 - t) * u) ** (1.0 / (1.0 - t))


def compute_normalization(activations: torch.Tensor, t: float, n_iters: int = 5) -> torch.Tensor:
    """Fixed-point estimate of the tempered-softmax normalizer (t > 1)"""
    mu = activations.max(dim=-1, keepdim=True).values
    normalized_step_0 = activations - mu
    normalized = normalized_step_0
    for _ in range(n_iters):
        logt_partition = exp_t(normalized, t).sum(dim=-1, keepdim=True)
        normalized = normalized_step_0 * logt_partition ** (1.0 - t)
    logt_partition = exp_t(normalized, t).sum(dim=-1, keepdim=True)
    return -log_t(1.0 / logt_partition, t) + mu


def tempered_softmax(activations: torch.Tensor, t: float, n_iters: int = 5) -> torch.Tensor:
    if t == 1.0:
        return torch.softmax(activations, dim=-1)
    return exp_t(activations - compute_normalization(activations, t, n_iters), t)


def _check_temperatures(t1: float, t2: float, n_iters: int):
    if not 0.0 < t1 <= 1.0 <= t2:
        raise ParameterError(f"Bi-tempered loss needs 0 < t1 <= 1 <= t2, got t1={t1}, t2={t2}")
    if n_iters < 1:
        raise ParameterError(f"n_iters must be >= 1, got {n_iters}")


def bitempered_loss(activations: torch.Tensor, target: torch.Tensor, t1: float, t2: float,
                    n_iters: int = 5) -> torch.Tensor:
    """
    Two-temperature logistic loss, averaged over rows
    The label-only term y * log_t1(y) is left out; it carries no gradient, and
    without it t1 = t2 = 1 is exactly soft-target cross-entropy.
    """
    _check_temperatures(t1, t2, n_iters)
    activations = torch.as_tensor(activations, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    if activations.shape != target.shape:
        raise ShapeError(f"activations {tuple(activations.shape)} and target {tuple(target.shape)} differ in shape")
    probs = tempered_softmax(activations, t2, n_iters)
    per_class = (-target * log_t(torch.clamp(probs, min=LOG_EPS), t1)
                 - (target ** (2.0 - t1) - probs ** (2.0 - t1)) / (2.0 - t1))
    return per_class.sum(dim=-1).mean()


@dataclass(frozen=True)
class BiTemperedLoss(LossSpec):
    t1: float
    t2: float
    n_iters: int = 5
    name = 'bitempered'

    def __post_init__(self):
        _check_temperatures(self.t1, self.t2, self.n_iters)

    def __call__(self, logits, targets):
        return bitempered_loss(logits, targets, self.t1, self.t2, self.n_iters)


# Ensembles

def ensemble_probabilities(models: Sequence[Union[TrainedModel, ModelParams]], features) -> np.ndarray:
    if len(models) == 0:
        raise ParameterError("An ensemble needs at least one model")
    with torch.no_grad():
        rows = [softmax_probs(forward_logits(getattr(model, 'params', model), features)).numpy()
                for model in models]
    stacked = np.stack(rows)
    # Entries all members agree on are kept as is, so identical members reproduce one model bit for bit
    unanimous = np.all(stacked == stacked[0], axis=0)
    return np.where(unanimous, stacked[0], stacked.mean(axis=0))


def ensemble_predict(models: Sequence[Union[TrainedModel, ModelParams]], features) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform average of member softmax rows; argmax with low-index tie-break"""
    probs = ensemble_probabilities(models, features)
    return np.argmax(probs, axis=1), probs


def train_ensemble(dataset: Dataset, train_config: TrainConfig, member_seeds: Sequence[int]) -> List[TrainedModel]:
    members = []
    for seed in member_seeds:
        members.append(train(dataset, dataclasses.replace(train_config, seed=int(seed))))
    return members
