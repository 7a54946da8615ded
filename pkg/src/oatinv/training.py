"""ANDMask gradient aggregation, ADAM, and the two training regimes.

``train_andmask`` draws a small batch from every training environment per
step, masks gradient components whose signs disagree across environments and
feeds the masked mean gradient to ADAM. ``train_benchmark`` runs the same
loop on the pooled data with the plain mean gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, TrainingDiverged
from .network import (
    GradientSet,
    NetworkConfig,
    ParameterSet,
    init_network,
    loss_and_grad,
    predict,
)
from .phantoms import DatasetSplit, Sample, stack_samples
from .seeding import derive_seed

log = logging.getLogger(__name__)

# slack on the tau * d threshold so decimal taus such as 0.6 * 5 compare as written
_THRESHOLD_SLACK = 1e-9


@dataclass(frozen=True)
class MaskConfig:
    tau: float
    d: int

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidArgument(f"tau must lie in [0, 1], got {self.tau}")
        if self.d < 1:
            raise InvalidArgument("d must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_per_env: int = 2
    pooled_batch: int = 10
    lr: float = 5e-4
    tau: float = 0.4
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.epochs, self.batch_per_env, self.pooled_batch, self.patience) < 1:
            raise InvalidArgument("epochs, batch sizes and patience must be positive")
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        MaskConfig(self.tau, 1)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


@dataclass
class TrainHistory:
    method: str
    train_loss: list[list[float]] = field(default_factory=list)  # [epoch][environment]
    val_loss: list[float] = field(default_factory=list)
    mask_survival: list[float] = field(default_factory=list)  # per step
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.val_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs_run"] = self.epochs_run
        return d


def andmask_mask(grads: list[GradientSet] | np.ndarray, tau: float) -> np.ndarray:
    """Boolean mask: component kept iff ``tau * d <= |sum_e sign(g_e)|``."""
    g = _stack(grads)
    d = g.shape[0]
    MaskConfig(tau, d)
    agreement = np.abs(np.sign(g).sum(axis=0))
    return tau * d <= agreement + _THRESHOLD_SLACK


def andmask_aggregate(grads: list[GradientSet], tau: float) -> GradientSet:
    """Masked mean of per-environment gradients.

    The mean is summed in sorted order per component, so the result does not
    depend on the order of ``grads``.
    """
    g = _stack(grads)
    mask = andmask_mask(g, tau)
    mean = np.sort(g, axis=0).sum(axis=0) / g.shape[0]
    return GradientSet(np.where(mask, mean, 0.0), grads[0].layout)


def _stack(grads) -> np.ndarray:
    if isinstance(grads, np.ndarray):
        return np.atleast_2d(grads)
    if len(grads) < 1:
        raise InvalidArgument("need at least one environment gradient")
    n = len(grads[0].values)
    if any(len(g.values) != n for g in grads):
        raise InvalidArgument("environment gradients differ in length")
    return np.stack([g.values for g in grads])


def adam_step(params: ParameterSet, grad: GradientSet | np.ndarray,
              state: AdamState) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected ADAM update; returns new objects, inputs are untouched."""
    g = grad.values if isinstance(grad, ParameterSet) else np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise InvalidArgument("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (params.with_values(new),
            AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps))


def andmask_gradient(params: ParameterSet, network: NetworkConfig,
                     env_batches: list[tuple[np.ndarray, np.ndarray]],
                     tau: float) -> tuple[GradientSet, list[float], np.ndarray]:
    """Per-environment losses and gradients for one step, then the masked mean."""
    losses, grads = [], []
    for x, y in env_batches:
        value, grad = loss_and_grad(params, network, x, y)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value}")
        losses.append(value)
        grads.append(grad)
    return andmask_aggregate(grads, tau), losses, andmask_mask(grads, tau)


def dataset_loss(params: ParameterSet, network: NetworkConfig, samples: list[Sample] | tuple,
                 chunk: int = 16) -> float:
    """Mean per-example squared error over a sample list or an (inputs, targets) pair."""
    x, y = stack_samples(samples) if isinstance(samples, list) else samples
    pred = predict(params, network, x, chunk)
    return float(np.sum((pred - y) ** 2) / len(x))


def pool_datasets(datasets: list[DatasetSplit]) -> DatasetSplit:
    pooled = DatasetSplit(label="pooled")
    for ds in datasets:
        pooled.train.extend(ds.train)
        pooled.validation.extend(ds.validation)
    return pooled


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_params: ParameterSet | None = None
        self.best_epoch = -1
        self.bad = 0

    def update(self, epoch: int, val: float, params: ParameterSet) -> bool:
        """Record the epoch; returns True when training should stop."""
        if val < self.best:
            self.best, self.best_epoch, self.bad = val, epoch, 0
            self.best_params = params.copy()
            return False
        self.bad += 1
        return self.bad >= self.patience


def train_andmask(config: TrainConfig, network: NetworkConfig, env_datasets: list[DatasetSplit],
                  seed: int | None = None,
                  init: ParameterSet | None = None) -> tuple[ParameterSet, TrainHistory]:
    seed = config.seed if seed is None else seed
    if not env_datasets:
        raise InvalidArgument("need at least one training environment")
    if any(len(ds.train) < config.batch_per_env for ds in env_datasets):
        raise InvalidArgument("every environment needs at least batch_per_env training samples")
    arrays = [stack_samples(ds.train) for ds in env_datasets]
    val_sets = [ds.validation for ds in env_datasets if ds.validation]
    d = len(env_datasets)
    MaskConfig(config.tau, d)

    params = init if init is not None else init_network(network, derive_seed(seed, "init"))
    state = AdamState.zeros(params.n_params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    b = config.batch_per_env
    steps = min(len(x) for x, _ in arrays) // b
    history = TrainHistory(method=f"andmask_tau{config.tau:g}")
    stopper = _EarlyStopper(config.patience)

    for epoch in range(config.epochs):
        perms = [rng.permutation(len(x)) for x, _ in arrays]
        epoch_losses = np.zeros(d)
        for step in range(steps):
            batches = []
            for (x, y), perm in zip(arrays, perms):
                idx = perm[step * b:(step + 1) * b]
                batches.append((x[idx], y[idx]))
            grad, losses, mask = andmask_gradient(params, network, batches, config.tau)
            params, state = adam_step(params, grad, state)
            epoch_losses += losses
            history.mask_survival.append(float(mask.mean()))
        history.train_loss.append((epoch_losses / steps).tolist())
        val = float(np.mean([dataset_loss(params, network, v) for v in val_sets])) if val_sets else math.nan
        history.val_loss.append(val)
        log.info("%s epoch %d train %s val %.5g survival %.3f", history.method, epoch,
                 np.round(history.train_loss[-1], 4).tolist(), val,
                 np.mean(history.mask_survival[-steps:]))
        if val_sets and stopper.update(epoch, val, params):
            history.stopped_early = epoch < config.epochs - 1
            break
    return _finish(params, stopper, history)


def train_benchmark(config: TrainConfig, network: NetworkConfig, pooled: DatasetSplit,
                    seed: int | None = None,
                    init: ParameterSet | None = None) -> tuple[ParameterSet, TrainHistory]:
    """Pooled training with the plain mean gradient and ``pooled_batch`` examples per step."""
    seed = config.seed if seed is None else seed
    if len(pooled.train) < config.pooled_batch:
        raise InvalidArgument("pooled dataset is smaller than one batch")
    x_all, y_all = stack_samples(pooled.train)
    params = init if init is not None else init_network(network, derive_seed(seed, "init"))
    state = AdamState.zeros(params.n_params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    b = config.pooled_batch
    steps = len(x_all) // b
    history = TrainHistory(method="benchmark")
    stopper = _EarlyStopper(config.patience)

    for epoch in range(config.epochs):
        perm = rng.permutation(len(x_all))
        total = 0.0
        for step in range(steps):
            idx = perm[step * b:(step + 1) * b]
            value, grad = loss_and_grad(params, network, x_all[idx], y_all[idx])
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value}")
            params, state = adam_step(params, grad, state)
            total += value
        history.train_loss.append([total / steps])
        val = dataset_loss(params, network, pooled.validation) if pooled.validation else math.nan
        history.val_loss.append(val)
        log.info("benchmark epoch %d train %.5g val %.5g", epoch, total / steps, val)
        if pooled.validation and stopper.update(epoch, val, params):
            history.stopped_early = epoch < config.epochs - 1
            break
    return _finish(params, stopper, history)


def _finish(params, stopper, history):
    if stopper.best_params is not None:
        history.best_epoch = stopper.best_epoch
        return stopper.best_params, history
    history.best_epoch = history.epochs_run - 1
    return params, history
