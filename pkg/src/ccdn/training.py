"""Losses, learning-rate schedule, SGD with momentum and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import PARAM_COUNT, CcdnParams, backward, forward, forward_with_cache, init_params

log = logging.getLogger(__name__)

POS_FLOOR = 1e-6
NEG_CEIL = 1.0 - 1e-6


@dataclass
class LabelMap:
    """Binary ground-truth corner map (1 = corner pixel)."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {self.labels.shape}")
        if np.any(self.labels > 1):
            raise ValueError("label map must be binary")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return self.labels.size - self.n_positive


def _check_dims(raw: np.ndarray, labels: LabelMap) -> None:
    if raw.shape != labels.shape:
        raise ValueError(f"response map {raw.shape} and label map {labels.shape} differ in size")


def clip_activation(raw: np.ndarray, labels: LabelMap) -> np.ndarray:
    """Clip the last-layer output into the domain of the log terms."""
    raw = np.asarray(raw)
    _check_dims(raw, labels)
    pos = labels.labels == 1
    return np.where(pos, np.clip(raw, POS_FLOOR, 1.0), np.clip(raw, 0.0, NEG_CEIL))


def regularization(params: CcdnParams, reg_lambda: float):
    """``(0.5 * lambda * |p|^2, lambda * p)``; biases included."""
    vec = params.to_vector().astype(np.float64)
    return 0.5 * reg_lambda * float(vec @ vec), reg_lambda * vec


def cross_entropy_loss(raw, labels: LabelMap, params: CcdnParams | None, reg_lambda: float):
    """Class-balanced clipped cross entropy.

    Returns ``(loss, grad_wrt_raw)``.  The gradient is zero wherever the clip
    is active; the regularization gradient is left to :func:`regularization`.
    """
    raw = np.asarray(raw)
    _check_dims(raw, labels)
    n_pos, n_neg = labels.n_positive, labels.n_negative
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"sample needs positive and negative pixels (got {n_pos}, {n_neg})")
    pos = labels.labels == 1
    a = clip_activation(raw, labels).astype(np.float64)
    data = -(np.log(a[pos]).sum() / n_pos + np.log1p(-a[~pos]).sum() / n_neg)
    reg = regularization(params, reg_lambda)[0] if params is not None and reg_lambda else 0.0

    grad = np.zeros(raw.shape, dtype=np.float64)
    live_pos = pos & (raw > POS_FLOOR) & (raw < 1.0)
    # negatives sit on a post-ReLU value, so 0 is the identity end of max(0, .)
    live_neg = ~pos & (raw < NEG_CEIL)
    grad[live_pos] = -1.0 / (n_pos * a[live_pos])
    grad[live_neg] = 1.0 / (n_neg * (1.0 - a[live_neg]))
    return float(data + reg), grad.astype(raw.dtype, copy=False)


def mse_loss(raw, labels: LabelMap):
    """Plain mean squared error over all pixels, no class balancing."""
    raw = np.asarray(raw)
    _check_dims(raw, labels)
    diff = raw.astype(np.float64) - labels.labels
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(raw.dtype, copy=False)


def msv(raw, labels: LabelMap) -> float:
    """Mean squared value of (prediction - label) over the pixels of one map."""
    return mse_loss(raw, labels)[0]


def learning_rate(i: int, initial_lr: float, decay_rate: float, tau: int) -> float:
    """Staircase exponential decay ``v0 * sigma ** floor(i / tau)``."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return initial_lr * decay_rate ** (i // tau)


@dataclass
class OptimizerState:
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(PARAM_COUNT))
    iteration: int = 0


def sgd_momentum_step(params: CcdnParams, grads, state: OptimizerState, lr: float,
                      momentum: float) -> tuple[CcdnParams, OptimizerState]:
    """``v <- m v - lr g; p <- p + v``.

    ``grads`` is a flat vector or a CcdnParams and must already include the
    regularization term.
    """
    g = grads.to_vector() if isinstance(grads, CcdnParams) else np.asarray(grads)
    velocity = momentum * state.velocity - lr * g
    vec = params.to_vector() + velocity.astype(params.dtype)
    return CcdnParams.from_vector(vec), OptimizerState(velocity, state.iteration + 1)


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    decay_rate: float = 0.95
    batch_size: int = 20
    momentum: float = 0.9
    reg_lambda: float = 0.01
    epochs: int = 100
    seed: int = 0
    loss: str = "ce"
    grad_clip: float | None = None       # max global L2 norm of a batch gradient

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.loss not in ("ce", "mse"):
            raise ValueError(f"unknown loss {self.loss!r} (expected 'ce' or 'mse')")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_msv: float
    lr: float

    def format(self) -> str:
        return (f"epoch={self.epoch} loss={self.loss:.8g} "
                f"val_msv={self.val_msv:.8g} lr={self.lr:.8g}")

    @classmethod
    def parse(cls, line: str) -> "EpochRecord":
        fields_ = dict(part.split("=", 1) for part in line.split())
        return cls(int(fields_["epoch"]), float(fields_["loss"]),
                   float(fields_["val_msv"]), float(fields_["lr"]))


def sample_loss_and_grad(image, labels: LabelMap, params: CcdnParams, loss: str = "ce"):
    """Data loss of one sample and its parameter gradient as a flat float64 vector."""
    raw, cache = forward_with_cache(image, params)
    if loss == "ce":
        value, grad_raw = cross_entropy_loss(raw, labels, None, 0.0)
    else:
        value, grad_raw = mse_loss(raw, labels)
    grads = backward(cache, grad_raw, params)
    return value, grads.to_vector().astype(np.float64)


def validation_msv(params: CcdnParams, dataset) -> float:
    """MSV pooled over every pixel of every validation image."""
    total, count = 0.0, 0
    for image, labels in dataset:
        raw = forward(image, params)
        total += msv(raw, labels) * labels.labels.size
        count += labels.labels.size
    return total / count if count else float("nan")


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def iterations_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def train(dataset: Sequence, config: TrainConfig, validation: Sequence = (),
          params: CcdnParams | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train CCDN with minibatch SGD + momentum under the staircase schedule.

    ``dataset`` and ``validation`` hold ``(image, LabelMap)`` pairs.  Returns
    ``(params, records)``; ``records[0]`` describes the untrained network
    (epoch 0, loss NaN), then one record per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    for idx, (image, labels) in enumerate(dataset):
        if np.shape(image)[:2] != labels.shape:
            raise ValueError(f"sample {idx}: image and label map differ in size")
        if config.loss == "ce" and (labels.n_positive == 0 or labels.n_negative == 0):
            raise ValueError(f"sample {idx}: label map has no positive or no negative pixels")

    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = init_params(init_seq)
    rng = np.random.default_rng(shuffle_seq)
    tau = iterations_per_epoch(len(dataset), config.batch_size)
    state = OptimizerState(np.zeros(PARAM_COUNT), 0)

    records = [EpochRecord(0, float("nan"), validation_msv(params, validation),
                           learning_rate(0, config.initial_lr, config.decay_rate, tau))]
    if on_epoch:
        on_epoch(records[0])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grad = np.zeros(PARAM_COUNT)
            loss_sum = 0.0
            for idx in batch:
                image, labels = dataset[idx]
                value, g = sample_loss_and_grad(image, labels, params, config.loss)
                loss_sum += value
                grad += g
            reg_value, reg_grad = regularization(params, config.reg_lambda)
            grad = grad / len(batch) + reg_grad
            if config.grad_clip is not None:
                grad = clip_by_norm(grad, config.grad_clip)
            batch_losses.append(loss_sum / len(batch) + reg_value)
            lr = learning_rate(state.iteration, config.initial_lr, config.decay_rate, tau)
            params, state = sgd_momentum_step(params, grad, state, lr, config.momentum)
        record = EpochRecord(
            epoch, float(np.mean(batch_losses)), validation_msv(params, validation),
            learning_rate(state.iteration, config.initial_lr, config.decay_rate, tau))
        records.append(record)
        log.info(record.format())
        if on_epoch:
            on_epoch(record)
    return params, records


def _activation_pattern(image, params: CcdnParams, labels: LabelMap, reg_lambda: float = 0.0):
    """Loss plus which side of every kink (ReLU, pool argmax, loss clip) the network sits on."""
    raw, cache = forward_with_cache(image, params)
    pos = labels.labels == 1
    clip = np.where(pos, (raw > POS_FLOOR) & (raw < 1.0), raw < NEG_CEIL)
    parts = [clip]
    for _, _, pre, argmax in cache:
        parts.append(pre > 0)
        if argmax is not None:
            parts.append(argmax)
    return cross_entropy_loss(raw, labels, params, reg_lambda)[0], parts


def gradient_check(params: CcdnParams, image, labels: LabelMap, reg_lambda: float = 0.01,
                   n_params: int = 240, step: float = 1e-4, seed=0,
                   analytic_grad: Callable | None = None) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Runs in float64 over ``n_params`` parameters drawn evenly across the six
    layers.  The numeric derivative is the Richardson extrapolation
    ``(4 D(step/2) - D(step)) / 3`` of central differences ``D``, which
    keeps truncation error negligible even for parameters with tiny
    gradients.  A parameter whose perturbations move any ReLU, pool or clip
    across a kink has no valid difference quotient; it is skipped and
    another one from the same layer is drawn.  ``analytic_grad(params,
    image, labels, reg_lambda)`` may replace the backprop gradient
    (mutation tests).
    """
    params = params.astype(np.float64)
    image = np.asarray(image, dtype=np.float64)

    if analytic_grad is None:
        analytic = sample_loss_and_grad(image, labels, params, "ce")[1]
        analytic = analytic + regularization(params, reg_lambda)[1]
    else:
        analytic = np.asarray(analytic_grad(params, image, labels, reg_lambda))

    base_pattern = _activation_pattern(image, params, labels)[1]
    rng = np.random.default_rng(seed)
    bounds = np.cumsum([0] + [b.size for b in params.layers])
    per_layer = -(-n_params // len(params.layers))
    vec = params.to_vector()

    def probe(idx: int, delta: float):
        """Loss at ``vec[idx] + delta``, or None if the pattern changed."""
        saved = vec[idx]
        vec[idx] = saved + delta
        loss, pattern = _activation_pattern(image, CcdnParams.from_vector(vec), labels, reg_lambda)
        vec[idx] = saved
        if all(np.array_equal(a, b) for a, b in zip(base_pattern, pattern)):
            return loss
        return None

    worst = 0.0
    checked = 0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        taken = 0
        for idx in rng.permutation(np.arange(lo, hi)):
            if taken == per_layer:
                break
            losses = []
            for delta in (step, -step, step / 2, -step / 2):
                value = probe(idx, delta)
                if value is None:
                    break
                losses.append(value)
            else:
                wide = (losses[0] - losses[1]) / (2 * step)
                narrow = (losses[2] - losses[3]) / step
                numeric = (4 * narrow - wide) / 3
                denom = max(abs(numeric), abs(analytic[idx]), 1e-8)
                worst = max(worst, abs(numeric - analytic[idx]) / denom)
                taken += 1
        checked += taken
    if checked < n_params:
        raise RuntimeError(f"only {checked} parameters had a kink-free neighbourhood")
    return worst
