"""Training loop, evaluation and the quadratic verification harness."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .data import Dataset, PersistencyPolicy, ScheduleEntry, make_epoch_schedule
from .errors import ConfigError, DivergenceError
from .nn import (
    LayerSpec,
    Network,
    batch_softmax_cross_entropy,
    forward,
    init_network,
    loss_and_gradient,
)
from .optim import MomentumSGD, OptimizerConfig, effective_lr

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


@dataclass(frozen=True)
class ExperimentConfig:
    policy: PersistencyPolicy
    architecture: tuple[LayerSpec, ...]
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 100
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        object.__setattr__(self, "architecture", tuple(self.architecture))


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    wall_clock_s: float
    train_loss: float
    test_loss: float
    test_acc: float
    updates: int
    minibatch_loads: int
    effective_lr_last: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


class StepInfo(NamedTuple):
    """What a step hook sees; ``loss`` is the minibatch mean before the update."""

    epoch: int
    step: int
    entry: ScheduleEntry
    lr: float
    loss: float
    grad: np.ndarray


def evaluate(net: Network, dataset: Dataset) -> tuple[float, float]:
    """Top-1 accuracy and mean per-example cross entropy.

    Argmax ties go to the lowest class index.
    """
    correct, losses = 0, []
    for start in range(0, len(dataset), EVAL_CHUNK):
        x = dataset.features[start : start + EVAL_CHUNK]
        y = dataset.labels[start : start + EVAL_CHUNK]
        logits, _ = forward(net, x)
        chunk_losses, _ = batch_softmax_cross_entropy(logits, y)
        losses.append(chunk_losses)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y))
    return correct / len(dataset), float(np.concatenate(losses).sum() / len(dataset))


class Trainer:
    """Runs persistency SGD for one :class:`ExperimentConfig`.

    Iterating :meth:`run` trains epoch by epoch and yields a
    :class:`MetricsRecord` every ``eval_every`` epochs and after the last
    epoch. Each schedule entry triggers a fresh forward/backward pass at the
    current parameters, so the K uses of a minibatch share data but never
    gradients. ``wall_clock_s`` counts training time only; evaluation passes
    are excluded.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        train_set: Dataset,
        test_set: Dataset,
        network: Network | None = None,
        step_hook: Callable[[StepInfo], None] | None = None,
    ):
        if len(test_set) < 1:
            raise ConfigError("test set is empty")
        if train_set.input_shape != test_set.input_shape:
            raise ConfigError(f"train inputs {train_set.input_shape} != test inputs {test_set.input_shape}")
        self.config = config
        self.train_set = train_set
        self.test_set = test_set
        if network is None:
            network = init_network(config.architecture, config.seed, train_set.input_shape)
        if network.input_shape != train_set.input_shape:
            raise ConfigError(f"network input {network.input_shape} != data {train_set.input_shape}")
        if network.num_classes != train_set.num_classes:
            raise ConfigError(f"network has {network.num_classes} outputs, data has {train_set.num_classes} classes")
        self.network = network
        self.optimizer = MomentumSGD(config.optimizer, size=network.num_params)
        self.step_hook = step_hook
        self.updates = 0
        self.minibatch_loads = 0
        self.last_lr = float("nan")

    def _train_epoch(self, epoch: int) -> float:
        cfg = self.config
        schedule = make_epoch_schedule(len(self.train_set), cfg.policy, epoch, cfg.seed)
        params = self.network.params
        loss_sum = 0.0
        x = y = None
        for entry in schedule:
            if entry.reuse_index == 1:
                x = self.train_set.features[entry.indices]
                y = self.train_set.labels[entry.indices]
                self.minibatch_loads += 1
            with np.errstate(over="ignore", invalid="ignore"):
                losses, grad = loss_and_gradient(self.network, x, y)
                loss = float(losses.mean())
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, step {self.updates + 1}",
                    epoch=epoch,
                    step=self.updates + 1,
                )
            lr = effective_lr(cfg.optimizer, entry.reuse_index)
            if self.step_hook is not None:
                self.step_hook(StepInfo(epoch, self.updates + 1, entry, lr, loss, grad))
            try:
                self.optimizer.step(params, grad, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", epoch=epoch, step=exc.step) from None
            self.updates += 1
            self.last_lr = lr
            loss_sum += loss
        return loss_sum / len(schedule)

    def run(self) -> Iterator[MetricsRecord]:
        cfg = self.config
        elapsed = 0.0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            train_loss = self._train_epoch(epoch)
            elapsed += time.perf_counter() - t0
            if epoch % cfg.eval_every and epoch != cfg.epochs:
                continue
            acc, test_loss = evaluate(self.network, self.test_set)
            record = MetricsRecord(
                epoch=epoch,
                wall_clock_s=elapsed,
                train_loss=train_loss,
                test_loss=test_loss,
                test_acc=acc,
                updates=self.updates,
                minibatch_loads=self.minibatch_loads,
                effective_lr_last=self.last_lr,
            )
            log.info(
                "epoch %d  K=%d m=%d  train %.4f  test %.4f  acc %.4f  %.2fs",
                epoch, cfg.policy.persistency, cfg.policy.batch_size,
                train_loss, test_loss, acc, elapsed,
            )
            yield record


def train(config: ExperimentConfig, train_set: Dataset, test_set: Dataset, step_hook=None):
    """Run to completion; returns ``(records, network)``."""
    trainer = Trainer(config, train_set, test_set, step_hook=step_hook)
    records = list(trainer.run())
    return records, trainer.network


# -- quadratic oracle -----------------------------------------------------


@dataclass
class QuadraticRun:
    curvatures: np.ndarray
    thetas: np.ndarray  # (steps + 1, dim)
    losses: np.ndarray  # (steps + 1,)
    lrs: np.ndarray  # (steps,)


def run_quadratic_oracle(
    dim: int,
    condition_number: float,
    policy: PersistencyPolicy,
    optimizer_config: OptimizerConfig,
    steps: int,
    theta0=None,
    seed: int = 0,
) -> QuadraticRun:
    """Minimize ``0.5 * sum_i d_i * theta_i**2`` with the persistency schedule.

    Coordinate i plays the role of training example i with loss
    ``0.5 * d_i * theta_i**2``, so a minibatch is a block of coordinates and
    its summed gradient is nonzero only on that block. Curvatures are
    geometrically spaced from 1 to ``condition_number``. ``losses[t]`` is the
    full objective at ``thetas[t]``; index 0 is the starting point (all ones
    unless ``theta0`` is given).
    """
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if condition_number < 1:
        raise ConfigError(f"condition number must be >= 1, got {condition_number}")
    d = np.geomspace(1.0, condition_number, dim) if dim > 1 else np.ones(1)
    theta = np.ones(dim) if theta0 is None else np.array(theta0, dtype=np.float64).reshape(dim)
    opt = MomentumSGD(optimizer_config, size=dim)
    thetas, lrs = [theta.copy()], []
    epoch = 0
    while len(lrs) < steps:
        epoch += 1
        for entry in make_epoch_schedule(dim, policy, epoch, seed):
            if len(lrs) == steps:
                break
            grad = np.zeros(dim)
            grad[entry.indices] = d[entry.indices] * theta[entry.indices]
            lr = effective_lr(optimizer_config, entry.reuse_index)
            opt.step(theta, grad, lr)
            thetas.append(theta.copy())
            lrs.append(lr)
    thetas = np.array(thetas)
    return QuadraticRun(d, thetas, 0.5 * (thetas**2 * d).sum(axis=1), np.array(lrs))
