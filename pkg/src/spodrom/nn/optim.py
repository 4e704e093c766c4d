"""Adam, the squared-error loss and the shared training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import TrainingDivergedError


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.2
    patience: int = 50
    min_delta: float = 1e-6
    lr_decay: float = 1.0  # multiplicative per-epoch factor

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(state: AdamState, params, grads, config: TrainConfig, t=None, lr=None):
    """Bias-corrected Adam update of ``params`` in place.

    ``t`` defaults to one past the state's step counter.
    """
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ValueError("iteration counter starts at 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name!r} at step {t}")
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    state.t = t


def mse_loss(pred, target, mask=None):
    """Mean over the batch of the squared 2-norm; returns ``(loss, dloss/dpred)``.

    ``mask`` (broadcastable to a sample) zeroes excluded entries.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    if mask is not None:
        diff = diff * mask
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n
