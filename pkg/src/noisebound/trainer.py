"""Minibatch training with margin-based stopping.

Two protocols are supported: plain SGD (the workhorse for nets up to
moderate depth), and Adam for very deep stacks where constant-step SGD is
unstable.  Cross-entropy is always the optimization objective; the margin
criterion is used only to decide when to stop, by measuring after each
epoch the fraction of training points classified with at least the target
margin.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import RngStream
from .network import MlpParams, batch_margins, grad_cross_entropy, stack_examples

__all__ = [
    "TrainConfig",
    "TrainResult",
    "AdamState",
    "TrainingDiverged",
    "train",
    "adam_step",
    "margin_accuracy",
]

# stream ids carved out of the run seed
_SHUFFLE_STREAM = 0x5F


class TrainingDiverged(RuntimeError):
    """Raised when weights or gradients stop being finite."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    batch_size: int = 64
    stop_fraction: float = 0.99
    stop_margin: float = 10.0
    max_epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.stop_fraction <= 1:
            raise ValueError("stop_fraction must lie in (0, 1]")
        if self.stop_margin < 0:
            raise ValueError("stop_margin must be nonnegative")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")


@dataclass(frozen=True)
class TrainResult:
    params: MlpParams
    epochs_run: int
    final_margin_accuracy: float
    converged: bool


@dataclass(frozen=True)
class AdamState:
    """Parameters plus first/second moment accumulators and step count."""

    weights: tuple[np.ndarray, ...]
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, weights) -> "AdamState":
        ws = tuple(np.array(w, dtype=np.float64) for w in weights)
        zeros = tuple(np.zeros_like(w) for w in ws)
        return cls(weights=ws, m=zeros, v=tuple(np.zeros_like(w) for w in ws))


def adam_step(state: AdamState, grads, lr: float) -> AdamState:
    if len(grads) != len(state.weights):
        raise ValueError("gradient count does not match parameter count")
    t = state.t + 1
    new_w, new_m, new_v = [], [], []
    for w, m, v, g in zip(state.weights, state.m, state.v, grads):
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match weights {w.shape}")
        m2 = state.beta1 * m + (1 - state.beta1) * g
        v2 = state.beta2 * v + (1 - state.beta2) * (g * g)
        m_hat = m2 / (1 - state.beta1 ** t)
        v_hat = v2 / (1 - state.beta2 ** t)
        new_w.append(w - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m2)
        new_v.append(v2)
    return replace(state, weights=tuple(new_w), m=tuple(new_m), v=tuple(new_v), t=t)


def margin_accuracy(params: MlpParams, data, gamma: float) -> float:
    """Fraction of examples classified with margin at least gamma (a margin
    exactly equal to gamma counts)."""
    xs, ys = stack_examples(data)
    return float(np.mean(batch_margins(params, xs, ys) >= gamma))


def _check_finite(weights, epoch: int, lr: float):
    for w in weights:
        if not np.all(np.isfinite(w)):
            raise TrainingDiverged(
                f"non-finite weights at epoch {epoch} (learning rate {lr}); "
                "reduce the learning rate or switch optimizers"
            )


def train(params: MlpParams, data, cfg: TrainConfig) -> TrainResult:
    """Run the configured optimizer until the margin criterion or the epoch
    cap is hit.  The input params are left untouched; the result carries a
    new MlpParams that keeps the ORIGINAL init snapshot (distances from
    initialization must survive training)."""
    data = list(data)
    if not data:
        raise ValueError("cannot train on an empty dataset")
    if cfg.batch_size > len(data):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(data)}")

    current = params
    if cfg.max_epochs == 0:
        acc = margin_accuracy(current, data, cfg.stop_margin)
        return TrainResult(current, 0, acc, False)

    shuffle_rng = RngStream(cfg.seed, _SHUFFLE_STREAM)
    adam = AdamState.fresh(params.weights) if cfg.optimizer == "adam" else None
    weights = params.copy_weights()
    n = len(data)
    epochs_run = 0
    converged = False
    acc = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = [data[i] for i in order[lo : lo + cfg.batch_size]]
            grads = grad_cross_entropy(current.with_weights(weights), batch)
            if cfg.optimizer == "sgd":
                weights = [w - cfg.learning_rate * g for w, g in zip(weights, grads)]
            else:
                adam = adam_step(adam, grads, cfg.learning_rate)
                weights = list(adam.weights)
        _check_finite(weights, epoch, cfg.learning_rate)
        current = current.with_weights(weights)
        epochs_run = epoch
        acc = margin_accuracy(current, data, cfg.stop_margin)
        if acc >= cfg.stop_fraction:
            converged = True
            break
    return TrainResult(current, epochs_run, acc, converged)
