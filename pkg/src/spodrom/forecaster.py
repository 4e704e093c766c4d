"""LSTM forecasting of latent series and dynamical diagnostics."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import jensenshannon

from .autoencoder import Standardizer, component_seeds
from .errors import (CorruptFileError, FormatError, RolloutDivergedError, SearchFailedError,
                     TrainingDivergedError)
from .nn import LSTMRegressor, TrainConfig, fit, load_params, write_params
from .nn.params import ParamStore
from .nn.train import chronological_split

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


@dataclass
class LstmConfig:
    n_hidden: int
    n_t_in: int = 10
    n_t_out: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_t_in < 1:
            raise ValueError("input window must hold at least one step")
        if self.n_t_out != 1:
            raise ValueError("autoregressive use needs a one-step output horizon")
        if self.n_hidden < 1:
            raise ValueError("hidden size must be positive")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    def to_dict(self):
        return {"n_hidden": self.n_hidden, "n_t_in": self.n_t_in, "n_t_out": self.n_t_out,
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train"] = TrainConfig.from_dict(d.get("train", {}))
        return cls(**d)


def make_windows(series, n_t_in):
    """Supervised pairs from a time-major ``[n_t, n_z]`` array with stride 1."""
    s = np.asarray(series, dtype=float)
    n = len(s) - n_t_in
    if n < 2:
        raise ValueError(f"series of length {len(s)} is too short for window {n_t_in}")
    idx = np.arange(n)[:, None] + np.arange(n_t_in)[None, :]
    return s[idx], s[n_t_in:]


class Forecaster:
    """One latent channel: the network, its standardization and the training bound."""

    def __init__(self, config: LstmConfig, n_z, stats: Standardizer, bound=1.0, seed=0,
                 params=None):
        self.config = config
        self.n_z = int(n_z)
        self.stats = stats
        self.bound = float(bound)  # max |z| of the standardized training series
        self.net = LSTMRegressor(self.n_z, config.n_hidden, seed=seed, params=params)

    @property
    def params(self):
        return self.net.params

    def predict_next(self, windows):
        """One-step predictions for physical-unit windows ``[batch, n_t_in, n_z]``."""
        w = self.stats.transform(windows)
        return self.stats.inverse(self.net.predict(w))

    def meta(self):
        return {"kind": "forecaster", "n_z": self.n_z, "config": self.config.to_dict(),
                "stats": self.stats.to_dict(), "bound": self.bound}

    @classmethod
    def from_meta(cls, meta, params):
        return cls(LstmConfig.from_dict(meta["config"]), meta["n_z"],
                   Standardizer.from_dict(meta["stats"]), meta["bound"], params=params)


def train_forecaster(latent, config: LstmConfig, seed=None):
    """Train on one real latent channel ``[n_z, n_t]``; returns ``(forecaster, history)``."""
    z = np.asarray(latent, dtype=float).T
    if z.ndim != 2:
        raise ValueError("latent channel must be [n_z, n_t]")
    seed = config.train.seed if seed is None else seed
    x, y = make_windows(z, config.n_t_in)
    cut = chronological_split(len(x), config.train.validation_fraction)
    # statistics from the steps the training pairs can see
    stats = Standardizer.fit(z[:cut + config.n_t_in])
    zs = stats.transform(z)
    x, y = make_windows(zs, config.n_t_in)
    fc = Forecaster(config, z.shape[1], stats, float(np.max(np.abs(zs[:cut + config.n_t_in]))),
                    seed=seed)
    tc = TrainConfig.from_dict({**config.train.to_dict(), "seed": int(seed)})
    hist = fit(fc.net, x[:cut], y[:cut], tc, x[cut:], y[cut:])
    return fc, hist


@dataclass
class ForecastResult:
    values: np.ndarray  # [n_z, horizon]
    diverged: bool
    max_abs: float
    meta: dict = field(default_factory=dict)


def rollout(fc: Forecaster, seed_window, horizon, mode="window"):
    """Closed-loop prediction from a ``[n_z, n_t_in]`` window.

    ``mode="window"`` re-runs the network over the latest ``n_t_in`` values
    at every step, exactly as in training.  ``mode="stateful"`` warms the
    state on the seed window and then carries ``(h, s)`` across steps.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    win = np.asarray(seed_window, dtype=float)
    n_in = fc.config.n_t_in
    if win.shape != (fc.n_z, n_in):
        raise ValueError(f"seed window must be [{fc.n_z}, {n_in}], got {win.shape}")
    buf = list(fc.stats.transform(win.T))
    out = np.empty((horizon, fc.n_z))
    limit = DIVERGENCE_FACTOR * fc.bound
    diverged = False
    if mode == "stateful":
        h = np.zeros((1, fc.config.n_hidden))
        s = np.zeros_like(h)
        for z in buf:
            y, h, s = fc.net.step(h, s, z[None])
    elif mode != "window":
        raise ValueError(f"unknown rollout mode {mode!r}")
    for t in range(horizon):
        if mode == "window":
            y = fc.net.predict(np.asarray(buf[-n_in:])[None])
        elif t > 0:
            y, h, s = fc.net.step(h, s, y)
        if not np.all(np.isfinite(y)):
            raise RolloutDivergedError(f"non-finite state at step {t}", step=t)
        out[t] = y[0]
        buf.append(y[0])
        if not diverged and np.max(np.abs(y)) > limit:
            diverged = True
            log.warning("rollout exceeded %g x the training range at step %d",
                        DIVERGENCE_FACTOR, t)
    values = fc.stats.inverse(out).T
    return ForecastResult(values, diverged, float(np.max(np.abs(out))),
                          {"mode": mode, "bound": fc.bound, "horizon": horizon})


class ComplexForecaster:
    """Independent forecasters for the real and imaginary latent channels."""

    def __init__(self, re: Forecaster, im: Forecaster):
        if re.n_z != im.n_z:
            raise ValueError("channel sizes differ")
        self.re, self.im = re, im

    @property
    def n_t_in(self):
        return max(self.re.config.n_t_in, self.im.config.n_t_in)

    def rollout(self, window, horizon, mode="window"):
        """``window`` complex ``[n_z, >= n_t_in]``; returns complex ``[n_z, horizon]`` and flags."""
        w = np.asarray(window)
        r = rollout(self.re, w.real[:, -self.re.config.n_t_in:], horizon, mode)
        i = rollout(self.im, w.imag[:, -self.im.config.n_t_in:], horizon, mode)
        corr = _cross_channel_correlation(r.values, i.values)
        return r.values + 1j * i.values, {"diverged": r.diverged or i.diverged,
                                          "max_abs_re": r.max_abs, "max_abs_im": i.max_abs,
                                          "cross_channel_corr": corr}


def _cross_channel_correlation(a, b):
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def train_complex_forecaster(latent, cfg_re: LstmConfig, cfg_im: LstmConfig | None = None, seed=0):
    z = np.asarray(latent)
    s_re, s_im = component_seeds(seed + 1)
    re, h_re = train_forecaster(z.real, cfg_re, seed=s_re)
    im, h_im = train_forecaster(z.imag, cfg_im or cfg_re, seed=s_im)
    return ComplexForecaster(re, im), {"re": h_re, "im": h_im}


def write_forecaster(path, fc: ComplexForecaster):
    store = ParamStore(seed=fc.re.params.seed)
    for tag, net in (("re", fc.re), ("im", fc.im)):
        for k, v in net.params.items():
            store.add(f"{tag}/{k}", v)
    write_params(path, store, {"kind": "complex_forecaster", "re": fc.re.meta(),
                               "im": fc.im.meta()})


def load_forecaster(path) -> ComplexForecaster:
    store, meta = load_params(path)
    if meta.get("kind") != "complex_forecaster":
        raise ValueError(f"{path} does not hold a forecaster")
    return ComplexForecaster(*[Forecaster.from_meta(meta[t], store.prefixed(f"{t}/").copy())
                               for t in ("re", "im")])


# -- hyperparameter search --------------------------------------------------

def random_search(latent, space, trials, epochs, seed=0, n_t_in=10, base: TrainConfig | None = None):
    """Uniform random search over hidden size, batch size and learning rate.

    ``space`` maps ``n_hidden``, ``batch_size`` and ``learning_rate`` to
    inclusive ``[lo, hi]`` ranges.  Returns ``(best LstmConfig, rows)``.
    """
    for key in ("n_hidden", "batch_size", "learning_rate"):
        lo, hi = space[key]
        if lo > hi:
            raise ValueError(f"empty range for {key}")
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(seed)
    base = base or TrainConfig()
    rows, best = [], None
    for trial in range(trials):
        n_h = int(rng.integers(space["n_hidden"][0], space["n_hidden"][1] + 1))
        batch = int(rng.integers(space["batch_size"][0], space["batch_size"][1] + 1))
        lr = float(rng.uniform(*space["learning_rate"])) if space["learning_rate"][0] < \
            space["learning_rate"][1] else float(space["learning_rate"][0])
        tc = TrainConfig.from_dict({**base.to_dict(), "learning_rate": lr, "batch_size": batch,
                                    "epochs": int(epochs), "seed": int(seed) + trial})
        cfg = LstmConfig(n_h, n_t_in, 1, tc)
        try:
            _, hist = train_forecaster(latent, cfg)
            val = hist.best_val
        except TrainingDivergedError:
            val = float("nan")
        rows.append({"trial": trial, "n_hidden": n_h, "batch_size": batch, "learning_rate": lr,
                     "val_loss": val})
        if np.isfinite(val) and (best is None or val < best[0]):
            best = (val, cfg)
    if best is None:
        raise SearchFailedError("every trial diverged")
    return best[1], rows


# -- diagnostics ---------------------------------------------------------------

@dataclass
class PoincareSection:
    points: np.ndarray  # [n_crossings, d - 1]
    pdf: np.ndarray
    edges: list


def crossings(series, dim=0):
    """Upward zero crossings of ``series[dim]`` with linear interpolation of all other dims."""
    s = np.asarray(series, dtype=float)
    if s.ndim != 2 or s.shape[1] < 3:
        raise ValueError("need a [d, n_t] series with n_t >= 3")
    x = s[dim]
    k = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    frac = -x[k] / (x[k + 1] - x[k])
    other = np.delete(s, dim, axis=0)
    return (other[:, k] + frac * (other[:, k + 1] - other[:, k])).T


def _edges(values, bins, spread=0.1):
    if np.ndim(bins) > 0:
        return np.asarray(bins, dtype=float)
    lo, hi = float(np.min(values)), float(np.max(values))
    pad = spread * (hi - lo) if hi > lo else max(abs(lo), 1.0) * spread
    return np.linspace(lo - pad, hi + pad, int(bins) + 1)


def poincare_section(series, dim=0, bins=50, edges=None):
    """Section at ``series[dim] = 0`` crossed upward, with a normalized histogram.

    The histogram is 2-D over the first two remaining dimensions (1-D when
    only one remains).  Default bins span the range of each remaining
    series component widened by 10% on both sides.  ``edges`` (one array per histogram axis) fixes the
    binning so that two sections can be compared.
    """
    pts = crossings(series, dim)
    n_axes = min(2, pts.shape[1])
    if len(pts) == 0:
        log.warning("Poincare section is empty")
        return PoincareSection(pts, np.zeros((0,) * n_axes), [])
    sub = pts[:, :n_axes]
    if edges is None:
        rest = np.delete(np.asarray(series, dtype=float), dim, axis=0)
        edges = [_edges(rest[j], bins) for j in range(n_axes)]
    hist, edges = np.histogramdd(sub, bins=edges, density=False)
    total = hist.sum()
    pdf = hist / total if total > 0 else hist
    return PoincareSection(pts, pdf, [np.asarray(e) for e in edges])


def js_divergence(p, q):
    """Jensen-Shannon divergence in bits between two histograms of equal shape."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError("histograms differ in shape")
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("empty histogram")
    return float(jensenshannon(p, q, base=2) ** 2)


def coefficient_pdf(series, bins=50):
    """Density histogram of a real series; returns ``(density, edges)``."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty series")
    return np.histogram(x, bins=bins, density=True)


def dominant_frequency(x, dt=1.0, pad=8):
    """Frequency of the largest zero-padded DFT peak of a mean-removed series."""
    x = np.asarray(x, dtype=float)
    n = len(x) * pad
    spec = np.abs(np.fft.rfft(x - x.mean(), n=n))
    return float(np.fft.rfftfreq(n, dt)[np.argmax(spec[1:]) + 1])


# -- latent file ------------------------------------------------------------

LATENT_MAGIC = b"SLAT"


def write_latent(path, values):
    v = np.asarray(values, dtype=np.complex128)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", LATENT_MAGIC, 1, *v.shape))
        fh.write(np.ascontiguousarray(v, dtype="<c16").tobytes())


def load_latent(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CorruptFileError(f"{path}: truncated latent file")
    magic, version, n_z, n_t = struct.unpack("<4sIII", raw[:16])
    if magic != LATENT_MAGIC or version != 1:
        raise FormatError(f"{path}: not a latent series file")
    if len(raw) != 16 + 16 * n_z * n_t:
        raise CorruptFileError(f"{path}: size disagrees with header")
    return np.frombuffer(raw[16:], dtype="<c16").reshape(n_z, n_t).copy()
