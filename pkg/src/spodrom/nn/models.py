"""Small network stacks built on :mod:`layers`.

Each model exposes ``params`` (a :class:`ParamStore`), ``predict(x)`` and
``loss_and_grad(x, y) -> (loss, grads)`` so the trainer and the gradient
checker can treat them alike.
"""

from __future__ import annotations

import numpy as np

from .layers import (conv2d_apply, conv2d_backward, dense_apply, dense_backward,
                     lstm_sequence, lstm_sequence_backward)
from .optim import mse_loss
from .params import ParamStore, glorot_uniform


class MLP:
    """Dense stack; ``activations[i]`` applies after layer ``i``."""

    def __init__(self, sizes, activations, seed=0, params=None):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.sizes = [int(s) for s in sizes]
        self.activations = list(activations)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore(seed=seed)
            for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                params.add(f"W{i}", glorot_uniform(rng, (b, a), a, b))
                params.add(f"b{i}", np.zeros(b))
        self.params = params

    @property
    def n_layers(self):
        return len(self.activations)

    def forward(self, x, upto=None):
        caches = []
        for i in range(self.n_layers if upto is None else upto):
            x, c = dense_apply(self.params[f"W{i}"], self.params[f"b{i}"], x, self.activations[i])
            caches.append(c)
        return x, caches

    def forward_from(self, x, start):
        for i in range(start, self.n_layers):
            x, _ = dense_apply(self.params[f"W{i}"], self.params[f"b{i}"], x, self.activations[i])
        return x

    def backward(self, dy, caches):
        grads = {}
        for i in reversed(range(len(caches))):
            dy, grads[f"W{i}"], grads[f"b{i}"] = dense_backward(self.params[f"W{i}"], dy, caches[i])
        return grads

    def predict(self, x):
        return self.forward(x)[0]

    def loss_and_grad(self, x, y):
        pred, caches = self.forward(x)
        loss, d = mse_loss(pred, y)
        return loss, self.backward(d, caches)

    def config(self):
        return {"sizes": self.sizes, "activations": self.activations}


class LSTMRegressor:
    """Single LSTM layer over an input window plus a linear readout of the last state.

    ``x`` is ``[batch, T, N_z]``; the output is ``[batch, N_out]``.
    """

    def __init__(self, n_in, n_hidden, n_out=None, seed=0, params=None):
        self.n_in = int(n_in)
        self.n_hidden = int(n_hidden)
        self.n_out = self.n_in if n_out is None else int(n_out)
        if params is None:
            rng = np.random.default_rng(seed)
            nh, nz = self.n_hidden, self.n_in
            params = ParamStore(seed=seed)
            params.add("W_lstm", glorot_uniform(rng, (4 * nh, nh + nz), nh + nz, nh))
            b = np.zeros(4 * nh)
            b[nh:2 * nh] = 1.0  # forget gate
            params.add("b_lstm", b)
            params.add("W_out", glorot_uniform(rng, (self.n_out, nh), nh, self.n_out))
            params.add("b_out", np.zeros(self.n_out))
        self.params = params

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ValueError(f"expected [batch, T, {self.n_in}], got {x.shape}")
        h, s, caches = lstm_sequence(self.params["W_lstm"], self.params["b_lstm"], x)
        y, dc = dense_apply(self.params["W_out"], self.params["b_out"], h, "linear")
        return y, (caches, dc)

    def predict(self, x):
        return self.forward(x)[0]

    def step(self, h, s, z):
        """Advance the recurrent state by one input and read out; returns ``(y, h, s)``."""
        from .layers import lstm_step
        h, s, _ = lstm_step(self.params["W_lstm"], self.params["b_lstm"], h, s, z)
        y, _ = dense_apply(self.params["W_out"], self.params["b_out"], h, "linear")
        return y, h, s

    def loss_and_grad(self, x, y):
        pred, (caches, dc) = self.forward(x)
        loss, d = mse_loss(pred, y)
        dh, dwo, dbo = dense_backward(self.params["W_out"], d, dc)
        dw, db, _ = lstm_sequence_backward(self.params["W_lstm"], dh, caches)
        return loss, {"W_lstm": dw, "b_lstm": db, "W_out": dwo, "b_out": dbo}

    def config(self):
        return {"n_in": self.n_in, "n_hidden": self.n_hidden, "n_out": self.n_out}


class ConvNet:
    """Same-size convolution stack with ReLU everywhere (non-negative output).

    ``mask`` ([nz, nx] booleans) restricts the loss to fluid cells.
    """

    def __init__(self, channels, kernel, seed=0, params=None, mask=None, final="relu",
                 hidden="relu"):
        self.channels = [int(c) for c in channels]
        self.kernel = int(kernel)
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.final = final
        self.hidden = hidden
        self.mask = None if mask is None else np.asarray(mask, dtype=float)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore(seed=seed)
            area = self.kernel ** 2
            for i, (a, b) in enumerate(zip(self.channels[:-1], self.channels[1:])):
                params.add(f"K{i}", glorot_uniform(rng, (b, a, self.kernel, self.kernel),
                                                   a * area, b * area))
                params.add(f"c{i}", np.zeros(b))
        self.params = params

    @property
    def n_layers(self):
        return len(self.channels) - 1

    def _act(self, i):
        return self.final if i == self.n_layers - 1 else self.hidden

    def forward(self, x):
        caches = []
        for i in range(self.n_layers):
            x, c = conv2d_apply(self.params[f"K{i}"], self.params[f"c{i}"], x, self._act(i))
            caches.append(c)
        return x, caches

    def predict(self, x):
        return self.forward(x)[0]

    def loss_and_grad(self, x, y):
        pred, caches = self.forward(x)
        loss, d = mse_loss(pred, y, self.mask)
        grads = {}
        for i in reversed(range(self.n_layers)):
            d, grads[f"K{i}"], grads[f"c{i}"] = conv2d_backward(self.params[f"K{i}"], d, caches[i])
        return loss, grads

    def config(self):
        return {"channels": self.channels, "kernel": self.kernel, "final": self.final,
                "hidden": self.hidden}
