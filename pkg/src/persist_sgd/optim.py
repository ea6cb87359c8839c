"""Momentum SGD with constant or persistency-adaptive learning rate.

Update at iteration t, applied elementwise::

    v_t       = momentum * v_{t-1} - lr_t * grad_sum_t
    theta_t+1 = theta_t + v_t

``grad_sum_t`` is the summed (not averaged) minibatch gradient. ``lr_t`` is
the base rate, or ``k * base`` on the k-th consecutive use of a minibatch
under :attr:`LRPolicy.ADAPTIVE`. The velocity is a single global buffer: it
is never reset at minibatch or reuse boundaries unless
:meth:`MomentumSGD.reset_velocity` is called explicitly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError


class LRPolicy(str, enum.Enum):
    CONSTANT = "constant"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    momentum: float = 0.5
    lr_policy: LRPolicy = LRPolicy.CONSTANT

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        object.__setattr__(self, "lr_policy", LRPolicy(self.lr_policy))


@dataclass
class OptimizerState:
    velocity: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size))


def effective_lr(config: OptimizerConfig, reuse_index: int) -> float:
    """Learning rate for the ``reuse_index``-th (1-based) use of a minibatch."""
    if reuse_index < 1:
        raise ConfigError(f"reuse index must be >= 1, got {reuse_index}")
    if config.lr_policy is LRPolicy.ADAPTIVE:
        return reuse_index * config.learning_rate
    return config.learning_rate


def momentum_step(params, grad_sum, state: OptimizerState, lr: float, momentum: float):
    """Apply one update in place to ``params`` and ``state``; returns ``params``.

    Nothing is modified if the gradient or the resulting parameters are not
    finite; a :class:`DivergenceError` carrying the 1-based step index is
    raised instead.
    """
    grad_sum = np.asarray(grad_sum, dtype=np.float64)
    if grad_sum.shape != params.shape or state.velocity.shape != params.shape:
        raise ConfigError(
            f"shape mismatch: params {params.shape}, gradient {grad_sum.shape}, "
            f"velocity {state.velocity.shape}"
        )
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    step = state.step_count + 1
    if not np.all(np.isfinite(grad_sum)):
        raise DivergenceError(f"non-finite gradient at step {step}", step=step)
    with np.errstate(over="ignore", invalid="ignore"):
        v = momentum * state.velocity - lr * grad_sum
        theta = params + v
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(theta))):
        raise DivergenceError(f"non-finite parameters after step {step}", step=step)
    params[...] = theta
    state.velocity[...] = v
    state.step_count = step
    return params


def reset_velocity(state: OptimizerState) -> OptimizerState:
    """Zero the velocity in place; ``step_count`` is kept."""
    state.velocity[...] = 0.0
    return state


@dataclass
class MomentumSGD:
    """Stateful wrapper binding a config to one velocity buffer."""

    config: OptimizerConfig
    state: OptimizerState = field(default=None)
    size: int | None = None

    def __post_init__(self):
        if self.state is None:
            if self.size is None:
                raise ConfigError("MomentumSGD needs either a state or a parameter count")
            self.state = OptimizerState.zeros(self.size)

    def lr_for(self, reuse_index: int) -> float:
        return effective_lr(self.config, reuse_index)

    def step(self, params, grad_sum, lr: float | None = None):
        lr = self.config.learning_rate if lr is None else lr
        return momentum_step(params, grad_sum, self.state, lr, self.config.momentum)

    def reset_velocity(self) -> None:
        reset_velocity(self.state)
