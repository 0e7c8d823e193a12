"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Module

logger = logging.getLogger(__name__)


@dataclass
class CosineSchedule:
    """lr(t) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi t / T))."""

    total_steps: int
    lr_max: float = 1e-4
    lr_min: float = 1e-5

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ConfigurationError(
                f"Need 0 <= lr_min <= lr_max, got {self.lr_min}, "
                f"{self.lr_max}"
            )

    def lr(self, step: int) -> float:
        t = min(max(step, 0), self.total_steps)
        cosine = 1.0 + math.cos(math.pi * t / self.total_steps)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * cosine


@dataclass
class OptimizerState:
    """Moments, step counters and hyperparameters of one AdamW run."""

    schedule: CosineSchedule
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    param_steps: Dict[str, int] = field(default_factory=dict)

    @property
    def current_lr(self) -> float:
        return self.schedule.lr(self.step)


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
) -> Mapping[str, np.ndarray]:
    """Apply one AdamW update in place and advance the schedule.

    Parameters whose gradient is ``None`` are left untouched, including
    their weight decay and moment estimates.
    """
    if state.step >= state.schedule.total_steps:
        raise ContractError(
            f"Optimizer step {state.step} beyond schedule of "
            f"{state.schedule.total_steps} steps"
        )
    lr = state.schedule.lr(state.step)
    beta1, beta2 = state.betas
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != value.shape:
            raise DimensionError(
                f"Gradient shape {grad.shape} does not match parameter "
                f"{name} {value.shape}"
            )
        m = state.first_moments.setdefault(name, np.zeros_like(value))
        v = state.second_moments.setdefault(name, np.zeros_like(value))
        t = state.param_steps.get(name, 0) + 1

        value *= 1.0 - lr * state.weight_decay
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.param_steps[name] = t
    state.step += 1
    return params


class AdamW:
    """Optimizer bound to a module's named parameters."""

    def __init__(
        self,
        module: Module,
        schedule: CosineSchedule,
        weight_decay: float = 0.01,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.module = module
        self.state = OptimizerState(
            schedule=schedule, weight_decay=weight_decay, betas=betas, eps=eps
        )

    def zero_grad(self) -> None:
        self.module.zero_grad()

    def step(self) -> float:
        """Update parameters from their gradients; return the lr used."""
        named = dict(self.module.named_parameters())
        lr = self.state.current_lr
        optimizer_step(
            self.state,
            {name: p.data for name, p in named.items()},
            {name: p.grad for name, p in named.items()},
        )
        logger.debug("optimizer step %d, lr %.3e", self.state.step, lr)
        return lr
