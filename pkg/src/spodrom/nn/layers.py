"""Forward and backward passes for dense, LSTM and 2-D convolution layers.

All functions work on a leading batch axis.  Forward passes return
``(output, cache)``; backward passes consume the cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("tanh", "linear", "relu")


def _check_act(act):
    if act not in ACTIVATIONS:
        raise ValueError(f"unknown activation {act!r}")


def activate(x, act):
    if act == "tanh":
        return np.tanh(x)
    if act == "relu":
        return np.maximum(x, 0.0)
    if act == "linear":
        return x
    raise ValueError(f"unknown activation {act!r}")


def activate_grad(y, pre, act):
    """Derivative of the activation, from its output ``y`` or input ``pre``."""
    if act == "tanh":
        return 1.0 - y * y
    if act == "relu":
        return (pre > 0).astype(float)
    return np.ones_like(y)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- dense -----------------------------------------------------------------

def dense_apply(w, b, x, activation="linear"):
    """``sigma(x W^T + b)`` for ``x`` of shape ``[batch, n_in]`` (or ``[n_in]``).

    ``w`` has shape ``[n_out, n_in]``.
    """
    _check_act(activation)
    x = np.asarray(x, dtype=float)
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
        raise ValueError(f"dense shapes disagree: W{w.shape}, b{b.shape}, x{x.shape}")
    pre = x @ w.T + b
    y = activate(pre, activation)
    return y, (x, pre, y, activation)


def dense_backward(w, dy, cache):
    """Returns ``(dx, dW, db)``."""
    x, pre, y, act = cache
    dpre = dy * activate_grad(y, pre, act)
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dpre.reshape(-1, dpre.shape[-1])
    return dpre @ w, d2.T @ x2, d2.sum(axis=0)


# -- LSTM ------------------------------------------------------------------

def lstm_step(w, b, h_prev, s_prev, z_in):
    """One LSTM step with gates stacked as ``[i; f; o; s]`` rows of ``w``.

    ``w`` is ``[4 N_h, N_h + N_z]`` acting on ``[h_prev; z_in]``.
    Returns ``(h, s, cache)``.
    """
    h_prev = np.asarray(h_prev, dtype=float)
    s_prev = np.asarray(s_prev, dtype=float)
    z_in = np.asarray(z_in, dtype=float)
    n_h = h_prev.shape[-1]
    if (w.shape != (4 * n_h, n_h + z_in.shape[-1]) or b.shape != (4 * n_h,)
            or s_prev.shape != h_prev.shape):
        raise ValueError(f"lstm shapes disagree: W{w.shape}, b{b.shape}, "
                         f"h{h_prev.shape}, s{s_prev.shape}, z{z_in.shape}")
    hz = np.concatenate([h_prev, z_in], axis=-1)
    pre = hz @ w.T + b
    i = sigmoid(pre[..., :n_h])
    f = sigmoid(pre[..., n_h:2 * n_h])
    o = sigmoid(pre[..., 2 * n_h:3 * n_h])
    g = np.tanh(pre[..., 3 * n_h:])
    s = f * s_prev + i * g
    ts = np.tanh(s)
    h = o * ts
    return h, s, (hz, s_prev, i, f, o, g, ts)


def lstm_step_backward(w, dh, ds, cache):
    """Backward through one step given gradients on ``h`` and ``s``.

    Returns ``(dh_prev, ds_prev, dz, dW, db)``.
    """
    hz, s_prev, i, f, o, g, ts = cache
    n_h = i.shape[-1]
    ds = ds + dh * o * (1.0 - ts * ts)
    dpre = np.concatenate([
        ds * g * i * (1.0 - i),
        ds * s_prev * f * (1.0 - f),
        dh * ts * o * (1.0 - o),
        ds * i * (1.0 - g * g),
    ], axis=-1)
    dhz = dpre @ w
    return dhz[..., :n_h], ds * f, dhz[..., n_h:], dpre.T @ hz, dpre.sum(axis=0)


def lstm_sequence(w, b, z_seq, h0=None, s0=None):
    """Run over ``z_seq`` of shape ``[batch, T, N_z]``; returns final ``(h, s, caches)``."""
    n_batch = z_seq.shape[0]
    n_h = b.shape[0] // 4
    h = np.zeros((n_batch, n_h)) if h0 is None else h0
    s = np.zeros((n_batch, n_h)) if s0 is None else s0
    caches = []
    for t in range(z_seq.shape[1]):
        h, s, c = lstm_step(w, b, h, s, z_seq[:, t])
        caches.append(c)
    return h, s, caches


def lstm_sequence_backward(w, dh, caches):
    """Backprop from a gradient on the final hidden state. Returns ``(dW, db, dz_seq)``."""
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[0])
    ds = np.zeros_like(dh)
    dzs = []
    for c in reversed(caches):
        dh, ds, dz, dwt, dbt = lstm_step_backward(w, dh, ds, c)
        dw += dwt
        db += dbt
        dzs.append(dz)
    return dw, db, np.stack(dzs[::-1], axis=1)


# -- conv2d ----------------------------------------------------------------

def _im2col(x, size, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (size, size), axis=(2, 3))
    # [B, C, nz, nx, L, L] -> [B, nz, nx, C, L, L]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d_apply(k, b, x, activation="linear", padding=None):
    """Same-size cross-correlation with zero padding.

    ``k`` is ``[C_out, C_in, L, L]`` with odd ``L``; ``x`` is
    ``[batch, C_in, nz, nx]`` or ``[C_in, nz, nx]``.
    """
    _check_act(activation)
    size = k.shape[-1]
    if size % 2 == 0 or k.shape[-2] != size:
        raise ValueError("kernel must be square with odd size")
    pad = (size - 1) // 2 if padding is None else padding
    if pad != (size - 1) // 2:
        raise ValueError("padding must equal (L-1)/2 to preserve the grid size")
    single = np.ndim(x) == 3
    x = np.asarray(x, dtype=float)
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != k.shape[1] or b.shape != (k.shape[0],):
        raise ValueError(f"conv shapes disagree: K{k.shape}, b{b.shape}, x{x.shape}")
    n_b, _, nz, nx = x.shape
    cols = _im2col(x, size, pad).reshape(n_b * nz * nx, -1)
    pre = (cols @ k.reshape(k.shape[0], -1).T + b).reshape(n_b, nz, nx, -1).transpose(0, 3, 1, 2)
    y = activate(pre, activation)
    cache = (cols, x.shape, pre, y, activation, single)
    return (y[0] if single else y), cache


def conv2d_backward(k, dy, cache):
    """Returns ``(dx, dK, db)`` with ``dx`` shaped like the forward input."""
    cols, xshape, pre, y, act, single = cache
    if single:
        dy = dy[None]
    n_b, c_in, nz, nx = xshape
    size = k.shape[-1]
    pad = (size - 1) // 2
    dpre = dy * activate_grad(y, pre, act)
    d2 = dpre.transpose(0, 2, 3, 1).reshape(-1, k.shape[0])
    dk = (d2.T @ cols).reshape(k.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ k.reshape(k.shape[0], -1)).reshape(n_b, nz, nx, c_in, size, size)
    dxp = np.zeros((n_b, c_in, nz + 2 * pad, nx + 2 * pad))
    for i in range(size):
        for j in range(size):
            dxp[:, :, i:i + nz, j:j + nx] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + nz, pad:pad + nx]
    return (dx[0] if single else dx), dk, db
