from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from errors import ConfigurationError, ParameterError, ShapeError

DTYPE = torch.float64
SIMPLEX_TOL = 1e-9


@dataclass
class ModelParams:
    """Weights and biases of a dense ReLU network.

    Weight matrices follow the torch layout (fan_out, fan_in), so layer i maps
    layer_sizes[i] inputs to layer_sizes[i + 1] outputs.
    """
    layer_sizes: List[int]
    weights: List[torch.Tensor]
    biases: List[torch.Tensor]
    seed: int

    def __post_init__(self):
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError(f"{len(self.layer_sizes)} layer sizes need {len(self.layer_sizes) - 1} weight matrices, "
                             f"got {len(self.weights)} weights and {len(self.biases)} biases")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if tuple(w.shape) != expected or tuple(b.shape) != expected[:1]:
                raise ShapeError(f"Layer {i}: expected weight {expected} and bias {expected[:1]}, "
                                 f"got {tuple(w.shape)} and {tuple(b.shape)}")

    def parameters(self) -> List[torch.Tensor]:
        """Tensors in optimizer order: W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def clone(self) -> 'ModelParams':
        """Detached copy that shares no storage with this one"""
        return ModelParams(
            layer_sizes=list(self.layer_sizes),
            weights=[w.detach().clone().requires_grad_(True) for w in self.weights],
            biases=[b.detach().clone().requires_grad_(True) for b in self.biases],
            seed=self.seed
        )


class AdamState:
    """Adam optimizer bound to one set of parameter tensors.

    Wraps torch.optim.Adam and exposes its moment accumulators and step count.
    """

    def __init__(self, tensors: Sequence[torch.Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ConfigurationError(f"Invalid Adam hyperparameters lr={lr}, betas=({beta1}, {beta2}), eps={eps}")
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.optimizer = torch.optim.Adam(self.tensors, lr=lr, betas=(beta1, beta2), eps=eps, foreach=False)
        self.step_count = 0

    @classmethod
    def for_params(cls, params: ModelParams, **hyperparams) -> 'AdamState':
        return cls(params.parameters(), **hyperparams)

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def step(self):
        """Apply one bias-corrected Adam update from the current .grad values"""
        self.optimizer.step()
        self.step_count += 1

    def _moment(self, key: str) -> List[torch.Tensor]:
        moments = []
        for tensor in self.tensors:
            state = self.optimizer.state.get(tensor, {})
            moments.append(state[key].detach().clone() if key in state else torch.zeros_like(tensor))
        return moments

    @property
    def first_moment(self) -> List[torch.Tensor]:
        return self._moment('exp_avg')

    @property
    def second_moment(self) -> List[torch.Tensor]:
        return self._moment('exp_avg_sq')


@dataclass
class Batch:
    """A minibatch of features and soft targets"""
    features: torch.Tensor
    targets: torch.Tensor

    def __post_init__(self):
        self.features = torch.as_tensor(self.features, dtype=DTYPE)
        self.targets = torch.as_tensor(self.targets, dtype=DTYPE)
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ShapeError("Batch features and targets must be 2-D")
        if self.features.shape[0] < 1 or self.features.shape[0] != self.targets.shape[0]:
            raise ShapeError(f"Batch has {self.features.shape[0]} feature rows and {self.targets.shape[0]} targets")
        if (self.targets < 0).any() or not torch.allclose(
                self.targets.sum(dim=1), torch.ones(self.targets.shape[0], dtype=DTYPE), rtol=0, atol=SIMPLEX_TOL):
            raise ParameterError("Batch targets must lie on the probability simplex")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class TrainConfig:
    """Everything that determines one training run.

    seed drives initialization and minibatch order of the model that is
    returned; prelim_seed drives any preliminary model (phase 1 of the k-NN
    pipeline, the anchor model).
    """
    hidden_sizes: List[int] = field(default_factory=lambda: [256, 256])
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    prelim_seed: int = 1
    loss: Optional[Callable] = None
    batch_transform: Optional[Callable[[Batch, np.random.Generator], Batch]] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError(f"hidden sizes must be positive, got {self.hidden_sizes}")

    def adam_hyperparams(self) -> dict:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps}


@dataclass
class TrainedModel:
    params: ModelParams
    config: Optional[TrainConfig] = None
    final_loss: Optional[float] = None

    @property
    def seed(self) -> int:
        return self.params.seed

    @property
    def layer_sizes(self) -> List[int]:
        return self.params.layer_sizes
