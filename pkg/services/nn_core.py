"""Deterministic dense-network trainer on torch (float64, CPU)."""

import logging
import math
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from errors import ConfigurationError, NumericError, ShapeError
from models.dataset import Dataset
from models.network import DTYPE, AdamState, Batch, ModelParams, TrainConfig, TrainedModel

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


def init_mlp(layer_sizes: Sequence[int], seed: int) -> ModelParams:
    """
    Glorot-uniform weights and zero biases, fully determined by seed
    Args:
        layer_sizes: input width, hidden widths..., number of classes
        seed: unsigned 64-bit seed
    Returns:
        ModelParams with gradient tracking enabled
    """
    layer_sizes = [int(size) for size in layer_sizes]
    if len(layer_sizes) < 2 or any(size < 1 for size in layer_sizes):
        raise ConfigurationError(f"layer_sizes needs >= 2 positive entries, got {layer_sizes}")

    generator = torch.Generator().manual_seed(int(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        uniform = torch.rand((fan_out, fan_in), generator=generator, dtype=DTYPE)
        weights.append(((2.0 * uniform - 1.0) * bound).requires_grad_(True))
        biases.append(torch.zeros(fan_out, dtype=DTYPE, requires_grad=True))

    return ModelParams(layer_sizes=layer_sizes, weights=weights, biases=biases, seed=int(seed))


def forward_logits(params: ModelParams, features) -> torch.Tensor:
    """Affine layers with ReLU on every hidden layer and no output activation"""
    hidden = torch.as_tensor(features, dtype=DTYPE)
    if hidden.ndim != 2 or hidden.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"Expected features of width {params.layer_sizes[0]}, got shape {tuple(hidden.shape)}")

    last = len(params.weights) - 1
    for i, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        hidden = F.linear(hidden, weight, bias)
        if i < last:
            hidden = torch.relu(hidden)
    return hidden


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax (torch subtracts the row max internally)"""
    logits = torch.as_tensor(logits, dtype=DTYPE)
    if not torch.isfinite(logits).all():
        raise NumericError("softmax_probs received NaN or infinite logits")
    return torch.softmax(logits, dim=-1)


def soft_cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Cross-entropy against soft targets, averaged over rows
    Args:
        probs: (m, L) or (L,) probabilities
        target: same shape as probs, rows on the simplex
    Returns:
        Scalar tensor -mean_i sum_j target_ij * log(max(probs_ij, 1e-12))
    """
    probs = torch.as_tensor(probs, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} and target {tuple(target.shape)} differ in shape")
    per_row = -(target * torch.log(torch.clamp(probs, min=LOG_EPS))).sum(dim=-1)
    return per_row.mean()


class LossSpec:
    """A training objective on (logits, soft targets)"""
    name = 'loss'

    def __call__(self, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class CrossEntropyLoss(LossSpec):
    """Plain soft-target cross-entropy on softmax outputs"""
    name = 'cross_entropy'

    def __call__(self, logits, targets):
        return soft_cross_entropy(softmax_probs(logits), targets)

    def __repr__(self):
        return 'CrossEntropyLoss()'


def _check_finite_gradients(tensors, step):
    for i, tensor in enumerate(tensors):
        if tensor.grad is not None and not torch.isfinite(tensor.grad).all():
            raise NumericError(f"Non-finite gradient in parameter tensor {i} at step {step}")


def train_step(params: ModelParams, adam_state: AdamState, batch: Batch,
               loss_spec: LossSpec) -> Tuple[ModelParams, AdamState, float]:
    """
    One reverse-mode gradient evaluation plus one Adam update, in place
    Returns:
        (params, adam_state, loss value before the update)
    """
    if not isinstance(loss_spec, LossSpec):
        raise ConfigurationError(f"Unsupported loss specification: {loss_spec!r}")

    adam_state.zero_grad()
    loss = loss_spec(forward_logits(params, batch.features), batch.targets)
    if not torch.isfinite(loss):
        raise NumericError(f"Non-finite loss {loss.item()} at step {adam_state.step_count} ({loss_spec!r})")
    loss.backward()
    _check_finite_gradients(params.parameters(), adam_state.step_count)
    adam_state.step()
    return params, adam_state, float(loss.item())


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of n indices, a distinct stream per epoch"""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def minibatches(dataset: Dataset, targets: torch.Tensor, config: TrainConfig, seed: int):
    """Yield (epoch, Batch) in the seeded order the trainer uses"""
    features = torch.as_tensor(dataset.features, dtype=DTYPE)
    for epoch in range(config.epochs):
        order = torch.as_tensor(epoch_order(dataset.n, seed, epoch))
        transform_rng = np.random.default_rng([int(seed), int(epoch), 1])
        for start in range(0, dataset.n, config.batch_size):
            index = order[start:start + config.batch_size]
            batch = Batch(features[index], targets[index])
            if config.batch_transform is not None and len(batch) >= 2:
                batch = config.batch_transform(batch, transform_rng)
            yield epoch, batch


def train(dataset: Dataset, train_config: TrainConfig) -> TrainedModel:
    """
    Train a fresh network on dataset.soft_labels
    Args:
        dataset: training data; its soft labels are the targets
        train_config: architecture, optimizer settings, seed, loss
    Returns:
        TrainedModel holding the final parameters
    """
    if dataset is None or len(dataset) == 0:
        raise ConfigurationError("Cannot train on an empty dataset")

    seed = train_config.seed
    loss_spec = train_config.loss or CrossEntropyLoss()
    layer_sizes = [dataset.dim, *train_config.hidden_sizes, dataset.n_classes]
    params = init_mlp(layer_sizes, seed)
    adam_state = AdamState.for_params(params, **train_config.adam_hyperparams())
    targets = torch.as_tensor(dataset.soft_labels, dtype=DTYPE)

    logger.debug(f"Training {layer_sizes} on {dataset.n} points, seed={seed}, loss={loss_spec!r}")
    loss_value, epoch_losses, current_epoch = None, [], 0
    for epoch, batch in minibatches(dataset, targets, train_config, seed):
        if epoch != current_epoch:
            logger.debug(f"epoch {current_epoch}: mean loss {np.mean(epoch_losses):.6f}")
            current_epoch, epoch_losses = epoch, []
        _, _, loss_value = train_step(params, adam_state, batch, loss_spec)
        epoch_losses.append(loss_value)

    return TrainedModel(params=params, config=train_config, final_loss=loss_value)


def predict(model: Union[TrainedModel, ModelParams], features) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predicted classes and probability rows
    Returns:
        (classes, probs); ties go to the lowest class index
    """
    params = model.params if isinstance(model, TrainedModel) else model
    with torch.no_grad():
        probs = softmax_probs(forward_logits(params, features)).numpy()
    return np.argmax(probs, axis=1), probs
