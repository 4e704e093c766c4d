"""Mini-batch training with early stopping, and the finite-difference checker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDivergedError
from .optim import AdamState, TrainConfig, adam_step, mse_loss

log = logging.getLogger(__name__)


@dataclass
class History:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stopped_early: bool = False

    def to_dict(self):
        return {"train": self.train, "val": self.val, "best_epoch": self.best_epoch,
                "best_val": self.best_val, "stopped_early": self.stopped_early}


def chronological_split(n, fraction):
    """Index of the first validation sample for an ordered series of length ``n``."""
    n_val = max(1, int(round(n * fraction)))
    if n - n_val < 1:
        raise ValueError(f"{n} samples cannot be split for validation")
    return n - n_val


def _loss(model, x, y):
    mask = getattr(model, "mask", None)
    return mse_loss(model.predict(x), y, mask)[0]


def _batched_loss(model, x, y, batch):
    total = 0.0
    for i in range(0, len(x), batch):
        total += _loss(model, x[i:i + batch], y[i:i + batch]) * len(x[i:i + batch])
    return total / len(x)


def fit(model, x, y, config: TrainConfig, x_val=None, y_val=None):
    """Train ``model`` in place with Adam; restores the best validation parameters.

    Without explicit validation data the last ``validation_fraction`` of the
    samples (in their given order) is held out.  Batches are drawn from a
    per-epoch permutation seeded by ``config.seed``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x_val is None:
        cut = chronological_split(len(x), config.validation_fraction)
        x, x_val, y, y_val = x[:cut], x[cut:], y[:cut], y[cut:]
    rng = np.random.default_rng(config.seed)
    state = AdamState(model.params)
    hist = History()
    best = model.params.snapshot()
    eval_batch = max(config.batch_size, 256)
    wait = 0
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        run = 0.0
        for i in range(0, len(x), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss, grads = model.loss_and_grad(x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            adam_step(state, model.params, grads, config, lr=lr)
            run += loss * len(idx)
        val = _batched_loss(model, x_val, y_val, eval_batch)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        hist.train.append(run / len(x))
        hist.val.append(val)
        if val < hist.best_val - config.min_delta:
            hist.best_val, hist.best_epoch = val, epoch
            best = model.params.snapshot()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                hist.stopped_early = True
                break
        lr *= config.lr_decay
    if hist.best_epoch >= 0:
        model.params.restore(best)
    return hist


@dataclass
class GradCheckReport:
    passed: bool
    errors: dict
    offending: list
    tolerance: float

    def __str__(self):
        worst = max(self.errors.values()) if self.errors else 0.0
        status = "pass" if self.passed else f"FAIL {self.offending}"
        return f"gradient check {status}: max rel error {worst:.2e} (tol {self.tolerance:g})"


def finite_difference_check(model, x, y, tolerance=1e-5, step=1e-6):
    """Compare analytic gradients with central differences for every parameter.

    The error per tensor is ``|g_a - g_fd| / max(|g_a|, |g_fd|)`` in the
    2-norm (absolute when both are below 1e-12).
    """
    _, grads = model.loss_and_grad(x, y)
    errors = {}
    for name in model.params.names():
        p = model.params[name]
        flat = p.reshape(-1)
        fd = np.empty(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            lp = _loss(model, x, y)
            flat[j] = old - step
            lm = _loss(model, x, y)
            flat[j] = old
            fd[j] = (lp - lm) / (2 * step)
        ga = np.asarray(grads[name]).reshape(-1)
        scale = max(np.linalg.norm(ga), np.linalg.norm(fd))
        diff = np.linalg.norm(ga - fd)
        errors[name] = float(diff / scale) if scale > 1e-12 else float(diff)
    offending = [k for k, e in errors.items() if not e <= tolerance]
    return GradCheckReport(not offending, errors, offending, tolerance)
