"""Convolutional velocity-to-concentration mapping and dispersion diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import GridGeometry
from .nn import ConvNet, TrainConfig, fit, load_params, write_params


@dataclass
class CnnConfig:
    channels: list = field(default_factory=lambda: [2, 8, 8, 1])
    kernel: int = 3
    padding: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if len(self.channels) < 2 or self.channels[0] != 2 or self.channels[-1] != 1:
            raise ValueError("channels must start at 2 (u, w) and end at 1 (c)")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.padding is None:
            self.padding = (self.kernel - 1) // 2
        if self.padding != (self.kernel - 1) // 2:
            raise ValueError("padding must be (L-1)/2")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    def to_dict(self):
        return {"channels": self.channels, "kernel": self.kernel, "padding": self.padding,
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("filter_size", None)  # accepted for compatibility, not used
        d["train"] = TrainConfig.from_dict(d.get("train", {}))
        return cls(**d)


class ScalarMap:
    """Trained CNN with the fluid mask of its grid."""

    def __init__(self, config: CnnConfig, mask, seed=0, params=None):
        self.config = config
        self.mask = np.asarray(mask, dtype=bool)
        self.net = ConvNet(config.channels, config.kernel, seed=seed, params=params,
                           mask=self.mask)

    @property
    def params(self):
        return self.net.params

    def __call__(self, velocity):
        return map_concentration(self, velocity)

    def meta(self):
        return {"kind": "scalar_map", "config": self.config.to_dict(),
                "mask": self.mask.astype(int).tolist()}


def _frames(velocity, mask_shape):
    v = np.asarray(velocity, dtype=float)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4 or v.shape[1] != 2 or v.shape[2:] != mask_shape:
        raise ValueError(f"velocity frames must be [N, 2, {mask_shape[0]}, {mask_shape[1]}], "
                         f"got {np.shape(velocity)}")
    return v


def train_cnn(velocity, concentration, config: CnnConfig, mask, seed=None):
    """Fit the map on aligned frames ``[N, 2, nz, nx]`` and ``[N, 1, nz, nx]``.

    The last ``validation_fraction`` frames are held out.  Returns
    ``(ScalarMap, history)``.
    """
    mask = np.asarray(mask, dtype=bool)
    v = _frames(velocity, mask.shape)
    c = np.asarray(concentration, dtype=float)
    if c.ndim == 3:
        c = c[:, None]
    if c.shape != (len(v), 1, *mask.shape):
        raise ValueError("concentration frames do not align with velocity frames")
    seed = config.train.seed if seed is None else seed
    model = ScalarMap(config, mask, seed=seed)
    tc = TrainConfig.from_dict({**config.train.to_dict(), "seed": int(seed)})
    hist = fit(model.net, v, c, tc)
    return model, hist


def map_concentration(model: ScalarMap, velocity):
    """Non-negative concentration ``[N, nz, nx]`` (or ``[nz, nx]`` for one frame)."""
    single = np.ndim(velocity) == 3
    v = _frames(velocity, model.mask.shape)
    out = model.net.predict(v)[:, 0] * model.mask
    return out[0] if single else out


def write_scalar_map(path, model: ScalarMap):
    write_params(path, model.params, model.meta())


def load_scalar_map(path) -> ScalarMap:
    store, meta = load_params(path)
    if meta.get("kind") != "scalar_map":
        raise ValueError(f"{path} does not hold a concentration map")
    return ScalarMap(CnnConfig.from_dict(meta["config"]), np.asarray(meta["mask"], dtype=bool),
                     params=store)


def vertical_mass_flux(w_frames, c_frames, geometry: GridGeometry, z_level, u_ref=1.0, c_ref=1.0):
    """Time-mean ``w c`` along the grid row nearest ``z_level``, over ``u_ref c_ref``.

    ``w_frames`` and ``c_frames`` are ``[N, nz, nx]``.  Returns ``(x, profile)``
    with solid cells set to NaN.
    """
    w = np.asarray(w_frames, dtype=float)
    c = np.asarray(c_frames, dtype=float)
    if w.shape != c.shape or w.shape[1:] != (geometry.nz, geometry.nx):
        raise ValueError("w and c frames must both be [N, nz, nx] on the grid")
    z = geometry.z
    if not z[0] - 0.5 * geometry.dz <= z_level <= z[-1] + 0.5 * geometry.dz:
        raise ValueError(f"z level {z_level} lies outside the grid")
    iz = int(np.argmin(np.abs(z - z_level)))
    fluid = geometry.mask[iz]
    if not fluid.any():
        raise ValueError(f"grid row {iz} at z={z[iz]:g} is entirely solid")
    prof = np.mean(w[:, iz] * c[:, iz], axis=0) / (u_ref * c_ref)
    return geometry.x.copy(), np.where(fluid, prof, np.nan)


@dataclass
class ProbeSeries:
    values: np.ndarray
    x: float
    z: float
    ix: int
    iz: int


def probe_history(frames, geometry: GridGeometry, location):
    """Series at the grid cell nearest ``location = (x, z)`` from ``[N, nz, nx]`` frames."""
    f = np.asarray(frames, dtype=float)
    if f.shape[1:] != (geometry.nz, geometry.nx):
        raise ValueError("frames do not match the grid")
    ix, iz = geometry.nearest_cell(*location)
    if not geometry.mask[iz, ix]:
        raise ValueError(f"probe at {location} falls in a solid cell")
    return ProbeSeries(f[:, iz, ix].copy(), float(geometry.x[ix]), float(geometry.z[iz]), ix, iz)
