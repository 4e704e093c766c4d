"""Dense autoencoders compressing SPOD coefficient series into a latent series.

The real and imaginary parts of the coefficients are handled by two
independent networks; the two latent channels are recombined into one
complex latent vector per time step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, TrainConfig, fit, load_params, write_params
from .nn.params import ParamStore
from .nn.train import chronological_split


@dataclass
class AeConfig:
    encoder_hidden: list
    latent_size: int
    train: TrainConfig = field(default_factory=TrainConfig)
    decoder_hidden: list | None = None
    scaling: str = "feature"

    def __post_init__(self):
        if self.scaling not in ("feature", "global"):
            raise ValueError("scaling must be 'feature' or 'global'")
        self.encoder_hidden = [int(h) for h in self.encoder_hidden]
        if self.decoder_hidden is None:
            self.decoder_hidden = self.encoder_hidden[::-1]
        self.decoder_hidden = [int(h) for h in self.decoder_hidden]
        if self.decoder_hidden != self.encoder_hidden[::-1]:
            raise ValueError("decoder widths must mirror the encoder widths")
        if self.latent_size < 1:
            raise ValueError("latent size must be positive")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    def to_dict(self):
        return {"encoder_hidden": self.encoder_hidden, "latent_size": self.latent_size,
                "decoder_hidden": self.decoder_hidden, "train": self.train.to_dict(),
                "scaling": self.scaling}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train"] = TrainConfig.from_dict(d.get("train", {}))
        return cls(**d)

    @classmethod
    def scaled(cls, n_m, latent_size, train=None, depth=3):
        """Desk-scale widths: halving from about ``n_m`` down towards the latent size."""
        widths, w = [], max(2 * latent_size, n_m)
        for _ in range(depth):
            w = max(latent_size + 1, w // 2)
            widths.append(int(w))
        return cls(widths, latent_size, train or TrainConfig())


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, scaling="feature"):
        """Statistics over axis 0; zero spread is replaced by one.

        ``scaling="feature"`` divides each feature by its own spread;
        ``"global"`` divides all features by one common RMS spread, which
        keeps weak features weak.
        """
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        if scaling == "global":
            std = np.full_like(mean, np.sqrt(np.mean((x - mean) ** 2)))
        elif scaling == "feature":
            std = x.std(axis=0)
        else:
            raise ValueError(f"unknown scaling {scaling!r}")
        return cls(mean, np.where(std > 0, std, 1.0))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


class Autoencoder:
    """Dense autoencoder acting on time-major samples ``[n_t, n_m]``."""

    def __init__(self, config: AeConfig, n_m, stats: Standardizer, seed=0, params=None):
        self.config = config
        self.n_m = int(n_m)
        self.stats = stats
        enc, dec = config.encoder_hidden, config.decoder_hidden
        sizes = [self.n_m, *enc, config.latent_size, *dec, self.n_m]
        acts = ["tanh"] * len(enc) + ["linear"] + ["tanh"] * len(dec) + ["linear"]
        self.net = MLP(sizes, acts, seed=seed, params=params)
        self.n_enc = len(enc) + 1
        self.latent_range = None

    @property
    def params(self):
        return self.net.params

    def _check(self, a, n):
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != n:
            raise ValueError(f"expected trailing size {n}, got {a.shape}")
        return a

    def encode(self, a):
        """Latent vectors for coefficient samples in physical units (``[..., n_m]``)."""
        a = self._check(a, self.n_m)
        return self.net.forward(self.stats.transform(a), upto=self.n_enc)[0]

    def decode(self, z):
        z = self._check(z, self.config.latent_size)
        return self.stats.inverse(self.net.forward_from(z, self.n_enc))

    def meta(self):
        return {"kind": "autoencoder", "n_m": self.n_m, "config": self.config.to_dict(),
                "stats": self.stats.to_dict(),
                "latent_range": None if self.latent_range is None else list(self.latent_range)}

    @classmethod
    def from_meta(cls, meta, params):
        ae = cls(AeConfig.from_dict(meta["config"]), meta["n_m"],
                 Standardizer.from_dict(meta["stats"]), params=params)
        ae.latent_range = None if meta.get("latent_range") is None else tuple(meta["latent_range"])
        return ae


def train_autoencoder(component, config: AeConfig, seed=None):
    """Train on one real component ``[n_m, n_t]`` (Re or Im of the coefficients).

    Statistics come from the chronological training part only.  Returns
    ``(autoencoder, history)``.
    """
    a = np.asarray(component, dtype=float)
    if a.ndim != 2:
        raise ValueError("component must be a [n_m, n_t] matrix")
    x = a.T
    seed = config.train.seed if seed is None else seed
    cut = chronological_split(len(x), config.train.validation_fraction)
    stats = Standardizer.fit(x[:cut], config.scaling)
    ae = Autoencoder(config, a.shape[0], stats, seed=seed)
    xs = stats.transform(x)
    tc = TrainConfig.from_dict({**config.train.to_dict(), "seed": int(seed)})
    hist = fit(ae.net, xs[:cut], xs[:cut], tc, xs[cut:], xs[cut:])
    z = ae.encode(x[:cut])
    ae.latent_range = (float(z.min()), float(z.max()))
    return ae, hist


@dataclass
class LatentSeries:
    values: np.ndarray  # complex [n_z, n_t]

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent series is not finite")

    @property
    def re(self):
        return self.values.real

    @property
    def im(self):
        return self.values.imag


class ComplexAutoencoder:
    """Pair of independent networks for the real and imaginary parts."""

    def __init__(self, re: Autoencoder, im: Autoencoder):
        if re.config.latent_size != im.config.latent_size or re.n_m != im.n_m:
            raise ValueError("real and imaginary networks disagree in size")
        self.re, self.im = re, im

    @property
    def n_m(self):
        return self.re.n_m

    @property
    def latent_size(self):
        return self.re.config.latent_size

    def encode(self, coeffs):
        """Complex coefficients ``[n_m, n_t]`` to a :class:`LatentSeries`."""
        c = np.asarray(coeffs)
        return LatentSeries((self.re.encode(c.real.T) + 1j * self.im.encode(c.imag.T)).T)

    def decode(self, latent):
        z = latent.values if isinstance(latent, LatentSeries) else np.asarray(latent)
        return (self.re.decode(z.real.T) + 1j * self.im.decode(z.imag.T)).T


def component_seeds(seed, n=2):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train_complex_autoencoder(coeffs, config: AeConfig, seed=0):
    """Returns ``(ComplexAutoencoder, {"re": history, "im": history})``."""
    c = np.asarray(coeffs)
    s_re, s_im = component_seeds(seed)
    re, h_re = train_autoencoder(c.real, config, seed=s_re)
    im, h_im = train_autoencoder(c.imag, config, seed=s_im)
    return ComplexAutoencoder(re, im), {"re": h_re, "im": h_im}


def write_autoencoder(path, ae: ComplexAutoencoder):
    store = ParamStore(seed=ae.re.params.seed)
    for tag, net in (("re", ae.re), ("im", ae.im)):
        for k, v in net.params.items():
            store.add(f"{tag}/{k}", v)
    write_params(path, store, {"kind": "complex_autoencoder", "re": ae.re.meta(),
                               "im": ae.im.meta()})


def load_autoencoder(path) -> ComplexAutoencoder:
    store, meta = load_params(path)
    if meta.get("kind") != "complex_autoencoder":
        raise ValueError(f"{path} does not hold an autoencoder")
    nets = [Autoencoder.from_meta(meta[t], store.prefixed(f"{t}/").copy()) for t in ("re", "im")]
    return ComplexAutoencoder(*nets)


def latent_size_study(component, sizes, config: AeConfig, field_metric=None):
    """Train one network per distinct latent size.

    ``field_metric`` optionally maps the decoded component ``[n_m, n_t]``
    to a field error (for instance decode, reconstruct and compare against
    the reduced-basis reference).  Rows hold ``n_z``, the final train and
    best validation losses, the validation NMSE in standardized units and
    the field metric.
    """
    a = np.asarray(component, dtype=float)
    rows = []
    for n_z in sorted(set(int(s) for s in sizes)):
        cfg = AeConfig(config.encoder_hidden, n_z, config.train, scaling=config.scaling)
        ae, hist = train_autoencoder(a, cfg)
        rows.append({"n_z": n_z, "train_loss": hist.train[-1] if hist.train else float("nan"),
                     "val_loss": hist.best_val, "val_nmse": validation_nmse(ae, a),
                     "field_nmse": None if field_metric is None
                     else float(field_metric(ae.decode(ae.encode(a.T)).T)),
                     "model": ae})
    return rows


def validation_nmse(ae: Autoencoder, component):
    """NMSE of the round trip on the held-out chronological tail, standardized units."""
    x = np.asarray(component, dtype=float).T
    cut = chronological_split(len(x), ae.config.train.validation_fraction)
    ref = ae.stats.transform(x[cut:])
    rec = ae.stats.transform(ae.decode(ae.encode(x[cut:])))
    return float(np.sum((rec - ref) ** 2) / np.sum(ref ** 2))
