"""Snapshot containers, the SROM binary format, synthetic flow generation,
mean/fluctuation decomposition and chronological splitting.

Field arrays are time-major: ``velocity[t, cell, component]`` with cells in
row-major ``(z, x)`` order, i.e. ``cell = iz * nx + ix``.  The flattened
snapshot vector used by the modal stages stacks all cells of component 0
followed by all cells of component 1 (``u'`` then ``w'``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptFileError, FormatError, InvalidDataError

SROM_MAGIC = b"SROM"
SROM_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB5d")


@dataclass
class GridGeometry:
    """Uniform 2-D sampling plane with a fluid/solid mask.

    ``mask`` has shape ``(nz, nx)``; ``True`` marks fluid.  ``origin`` is the
    physical coordinate ``(x0, z0)`` of cell ``(ix=0, iz=0)``.
    """

    nx: int
    nz: int
    dx: float
    dz: float
    mask: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.nx = int(self.nx)
        self.nz = int(self.nz)
        if self.nx < 1 or self.nz < 1:
            raise ValueError("grid needs nx >= 1 and nz >= 1")
        if not (self.dx > 0 and self.dz > 0):
            raise ValueError("grid spacings must be positive")
        if self.mask is None:
            self.mask = np.ones((self.nz, self.nx), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.nz, self.nx)
        if not self.mask.any():
            raise InvalidDataError("grid has no fluid cell")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def n_cells(self):
        return self.nx * self.nz

    @property
    def fluid(self):
        """Flat boolean fluid mask of length ``n_cells``."""
        return self.mask.reshape(-1)

    @property
    def x(self):
        return self.origin[0] + self.dx * np.arange(self.nx)

    @property
    def z(self):
        return self.origin[1] + self.dz * np.arange(self.nz)

    def nearest_cell(self, x, z):
        """Return ``(ix, iz)`` of the grid point closest to ``(x, z)``."""
        ix = int(np.floor((x - self.origin[0]) / self.dx + 0.5))
        iz = int(np.floor((z - self.origin[1]) / self.dz + 0.5))
        if not (0 <= ix < self.nx and 0 <= iz < self.nz):
            raise ValueError(f"point ({x}, {z}) lies outside the grid")
        return ix, iz

    def quadrature_weights(self, n_v):
        """Per-entry weights of the stacked snapshot vector: ``dx*dz`` on fluid, 0 on solid."""
        w = np.where(self.fluid, self.dx * self.dz, 0.0)
        return np.tile(w, n_v)


@dataclass
class DatasetMeta:
    """Physical scales attached to a dataset.

    When ``q_c`` is given the reference concentration is derived as
    ``q_c / (u_ref * h_ref * span_length)``.
    """

    dt: float
    u_ref: float = 1.0
    c_ref: float | None = None
    q_c: float | None = None
    span_length: float = 1.0
    h_ref: float = 1.0
    n_v: int = 2
    re_h: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.u_ref > 0:
            raise ValueError("u_ref must be positive")
        if self.q_c is not None:
            derived = self.q_c / (self.u_ref * self.h_ref * self.span_length)
            if self.c_ref is not None and not math.isclose(self.c_ref, derived, rel_tol=1e-12):
                raise ValueError("c_ref disagrees with q_c / (u_ref * h_ref * span_length)")
            self.c_ref = derived
        if self.c_ref is None:
            self.c_ref = 1.0


@dataclass
class SnapshotDataset:
    geometry: GridGeometry
    meta: DatasetMeta
    velocity: np.ndarray
    concentration: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.times is None:
            self.times = self.meta.dt * np.arange(self.velocity.shape[0])
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.concentration is not None:
            self.concentration = np.asarray(self.concentration, dtype=np.float64)
        self.validate()

    def validate(self):
        g, v = self.geometry, self.velocity
        if v.ndim != 3 or v.shape[1] != g.n_cells or v.shape[2] != self.meta.n_v:
            raise InvalidDataError(
                f"velocity shape {v.shape} does not match (n_t, {g.n_cells}, {self.meta.n_v})")
        if self.times.shape != (v.shape[0],):
            raise InvalidDataError("times length differs from the snapshot count")
        if len(self.times) > 1:
            steps = np.diff(self.times)
            if not np.allclose(steps, self.meta.dt, rtol=1e-9, atol=0.0):
                raise InvalidDataError("snapshot times are not uniformly spaced by dt")
        if not np.all(np.isfinite(v)):
            raise InvalidDataError("velocity contains non-finite values")
        solid = ~g.fluid
        if np.any(v[:, solid, :] != 0.0):
            raise InvalidDataError("solid cells must hold exactly zero velocity")
        if self.concentration is not None:
            c = self.concentration
            if c.shape != v.shape[:2]:
                raise InvalidDataError("concentration shape does not match velocity")
            if not np.all(np.isfinite(c)):
                raise InvalidDataError("concentration contains non-finite values")
            if np.any(c[:, solid] != 0.0):
                raise InvalidDataError("solid cells must hold exactly zero concentration")

    @property
    def n_t(self):
        return self.velocity.shape[0]

    @property
    def n_x(self):
        return self.geometry.n_cells

    @property
    def n_v(self):
        return self.meta.n_v

    @property
    def n_xv(self):
        return self.n_x * self.n_v

    def snapshot_matrix(self):
        """Time-major matrix ``[n_t, n_xv]``; each row is a stacked snapshot vector."""
        return self.velocity.transpose(0, 2, 1).reshape(self.n_t, self.n_xv)

    def with_velocity_matrix(self, matrix, concentration=None, times=None):
        """Build a dataset on the same grid from a ``[n_t, n_xv]`` matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        vel = matrix.reshape(matrix.shape[0], self.n_v, self.n_x).transpose(0, 2, 1)
        if times is None:
            times = self.meta.dt * np.arange(matrix.shape[0])
        return SnapshotDataset(self.geometry, self.meta, np.ascontiguousarray(vel),
                               concentration, times)

    def frames(self):
        """Velocity as image frames ``[n_t, n_v, nz, nx]``."""
        g = self.geometry
        return self.velocity.transpose(0, 2, 1).reshape(self.n_t, self.n_v, g.nz, g.nx)

    def concentration_frames(self):
        g = self.geometry
        if self.concentration is None:
            raise ValueError("dataset carries no concentration")
        return self.concentration.reshape(self.n_t, 1, g.nz, g.nx)

    def subset(self, start, stop):
        conc = None if self.concentration is None else self.concentration[start:stop]
        return SnapshotDataset(self.geometry, self.meta, self.velocity[start:stop],
                               conc, self.times[start:stop])


@dataclass
class MeanField:
    mean_velocity: np.ndarray
    mean_concentration: np.ndarray | None = None
    source: str = "computed-from-training"

    def __post_init__(self):
        if self.source not in ("computed-from-training", "loaded"):
            raise ValueError(f"unknown mean source {self.source!r}")
        if not np.all(np.isfinite(self.mean_velocity)):
            raise InvalidDataError("mean velocity contains non-finite values")


# --------------------------------------------------------------------------
# SROM file format


def write_snapshots(path, data: SnapshotDataset):
    g, m = data.geometry, data.meta
    has_c = data.concentration is not None
    header = _HEADER.pack(SROM_MAGIC, SROM_VERSION, g.nx, g.nz, m.n_v, data.n_t,
                          int(has_c), m.dt, m.u_ref, m.c_ref, g.dx, g.dz)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(g.mask.astype(np.uint8).tobytes())
        # component-outer within each frame
        fh.write(np.ascontiguousarray(data.velocity.transpose(0, 2, 1), dtype="<f8").tobytes())
        if has_c:
            fh.write(np.ascontiguousarray(data.concentration, dtype="<f8").tobytes())


def load_snapshots(path, origin=(0.0, 0.0), h_ref=1.0) -> SnapshotDataset:
    """Read an SROM file.

    The format does not carry the grid origin or building height; pass them
    if physical coordinates matter downstream.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError("file shorter than the SROM header")
    magic, version, nx, nz, n_v, n_t, has_c, dt, u_ref, c_ref, dx, dz = _HEADER.unpack_from(raw)
    if magic != SROM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SROM_MAGIC!r}")
    if version != SROM_VERSION:
        raise FormatError(f"unsupported SROM version {version}")
    n_cells = nx * nz
    expected = _HEADER.size + n_cells + 8 * n_t * n_cells * n_v + (8 * n_t * n_cells if has_c else 0)
    if len(raw) != expected:
        raise CorruptFileError(f"file has {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    mask = np.frombuffer(raw, dtype=np.uint8, count=n_cells, offset=off).astype(bool)
    off += n_cells
    vel = np.frombuffer(raw, dtype="<f8", count=n_t * n_cells * n_v, offset=off)
    vel = vel.reshape(n_t, n_v, n_cells).transpose(0, 2, 1).astype(np.float64)
    off += 8 * vel.size
    conc = None
    if has_c:
        conc = np.frombuffer(raw, dtype="<f8", count=n_t * n_cells, offset=off)
        conc = conc.reshape(n_t, n_cells).astype(np.float64)
    if not dt > 0:
        raise InvalidDataError("non-positive dt in header")
    try:
        geom = GridGeometry(nx, nz, dx, dz, mask.reshape(nz, nx), origin)
    except ValueError as exc:
        raise InvalidDataError(str(exc)) from exc
    meta = DatasetMeta(dt=dt, u_ref=u_ref, c_ref=c_ref, h_ref=h_ref, n_v=n_v)
    return SnapshotDataset(geom, meta, np.ascontiguousarray(vel), conc)


def file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_mean_field(path, mean: MeanField, geometry: GridGeometry, meta: DatasetMeta):
    """Persist a mean field as a one-snapshot SROM file."""
    conc = None if mean.mean_concentration is None else mean.mean_concentration[None]
    write_snapshots(path, SnapshotDataset(geometry, meta, mean.mean_velocity[None], conc))


def load_mean_field(path) -> MeanField:
    ds = load_snapshots(path)
    conc = None if ds.concentration is None else ds.concentration[0].copy()
    return MeanField(ds.velocity[0].copy(), conc, source="loaded")


# --------------------------------------------------------------------------
# mean / fluctuation


def compute_fluctuations(data: SnapshotDataset, mean: MeanField | None = None):
    """Subtract the temporal mean (computed here, or the given one) from every snapshot.

    Returns ``(fluctuations, mean)``.  Pass the training mean when processing
    test data so nothing leaks from the held-out window.
    """
    if mean is None:
        mv = data.velocity.mean(axis=0)
        mc = None if data.concentration is None else data.concentration.mean(axis=0)
        mean = MeanField(mv, mc, source="computed-from-training")
    if mean.mean_velocity.shape != (data.n_x, data.n_v):
        raise ValueError(
            f"mean shape {mean.mean_velocity.shape} does not match ({data.n_x}, {data.n_v})")
    solid = ~data.geometry.fluid
    vel = data.velocity - mean.mean_velocity[None]
    vel[:, solid, :] = 0.0
    conc = None
    if data.concentration is not None:
        if mean.mean_concentration is not None:
            if mean.mean_concentration.shape != (data.n_x,):
                raise ValueError("mean concentration shape mismatch")
            conc = data.concentration - mean.mean_concentration[None]
        else:
            conc = data.concentration.copy()
        conc[:, solid] = 0.0
    return SnapshotDataset(data.geometry, data.meta, vel, conc, data.times.copy()), mean


def add_mean(fluct: SnapshotDataset, mean: MeanField) -> SnapshotDataset:
    vel = fluct.velocity + mean.mean_velocity[None]
    vel[:, ~fluct.geometry.fluid, :] = 0.0
    conc = fluct.concentration
    if conc is not None and mean.mean_concentration is not None:
        conc = conc + mean.mean_concentration[None]
    return SnapshotDataset(fluct.geometry, fluct.meta, vel, conc, fluct.times.copy())


def split_train_test(data: SnapshotDataset, ratio: float):
    """Chronological split: the first ``floor(ratio * n_t)`` snapshots train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n_train = math.floor(ratio * data.n_t + 1e-9)
    if n_train < 2:
        raise ValueError(f"training split would hold only {n_train} snapshots")
    return data.subset(0, n_train), data.subset(n_train, data.n_t)


# --------------------------------------------------------------------------
# synthetic flow


@dataclass
class PlantedComponent:
    """One planted oscillation ``Re(a * p(x) * exp(i(2 pi f t + phase)))``."""

    pattern: int
    frequency: float
    amplitude: float
    phase: float = 0.0
    # std of the per-unit-time phase random walk; > 0 gives a finite coherence time
    phase_diffusion: float = 0.0


@dataclass
class SynthConfig:
    nx: int = 24
    nz: int = 16
    n_t: int = 4096
    dt: float = 1.0
    dx: float = 1.0 / 12
    dz: float = 1.0 / 12
    origin: tuple[float, float] = (-1.0, 0.0)
    components: list[PlantedComponent] = field(default_factory=list)
    noise_amplitude: float = 0.0
    snr_db: float | None = None
    mean_speed: float = 0.0
    building_rows: int = 0
    canyon_cols: int = 0
    conc_offset: float = 0.5
    conc_u: float = 0.5
    conc_w: float = -0.5
    with_concentration: bool = True
    u_ref: float = 1.0
    h_ref: float = 1.0

    def __post_init__(self):
        self.components = [c if isinstance(c, PlantedComponent) else PlantedComponent(**c)
                           for c in self.components]
        self.origin = tuple(self.origin)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return dataclasses.asdict(self)

    def geometry(self):
        mask = np.ones((self.nz, self.nx), dtype=bool)
        if self.building_rows > 0:
            lo = (self.nx - self.canyon_cols) // 2
            keep = np.zeros(self.nx, dtype=bool)
            keep[lo:lo + self.canyon_cols] = True
            mask[: self.building_rows, ~keep] = False
        return GridGeometry(self.nx, self.nz, self.dx, self.dz, mask, self.origin)


def _wavenumber_pairs(count, nx, nz):
    pairs = []
    s = 2
    while len(pairs) < count:
        for mz in range(1, s):
            mx = s - mz
            if mx < nx // 2 and mz < nz:
                pairs.append((mx, mz))
        s += 1
        if s > nx + nz + 2:
            raise ValueError(f"grid too small for {count} distinct patterns")
    return pairs[:count]


def pattern_library(geometry: GridGeometry, count: int, n_v: int = 2):
    """Weighted-orthonormal complex spatial patterns, shape ``[count, n_x * n_v]``.

    Pattern ``j`` is a streamwise-travelling, roughly solenoidal wave built
    from a streamfunction ``sin(pi*mz*zeta) * exp(2i*pi*mx*xi)``; the set is
    then orthonormalized in the quadrature-weighted inner product.
    """
    if n_v != 2:
        raise ValueError("pattern library is defined for two velocity components")
    g = geometry
    xi = (np.arange(g.nx) / g.nx)[None, :]
    zeta = ((np.arange(g.nz) + 0.5) / g.nz)[:, None]
    cols = []
    for mx, mz in _wavenumber_pairs(count, g.nx, g.nz):
        carrier = np.exp(2j * np.pi * mx * xi)
        u = np.pi * mz * np.cos(np.pi * mz * zeta) * carrier
        w = -2j * np.pi * mx * np.sin(np.pi * mz * zeta) * carrier
        cols.append(np.concatenate([u.reshape(-1), w.reshape(-1)]))
    p = np.array(cols).T
    w = g.quadrature_weights(n_v)
    sw = np.sqrt(w)
    q, r = np.linalg.qr(sw[:, None] * p)
    # fix the QR phase ambiguity so patterns keep their analytic orientation
    q = q * (np.diag(r) / np.abs(np.diag(r)))[None, :]
    out = np.zeros_like(q)
    pos = sw > 0
    out[pos] = q[pos] / sw[pos, None]
    return out.T


def synthesize_flow(config: SynthConfig, seed: int) -> SnapshotDataset:
    """Deterministic synthetic flow with planted oscillations plus white noise.

    Without phase diffusion the planted part does not depend on ``seed``;
    the noise and the phase random walks do (from separate streams).
    """
    nyquist = 1.0 / (2.0 * config.dt)
    for c in config.components:
        if c.frequency < 0 or c.frequency > nyquist:
            raise ValueError(f"planted frequency {c.frequency} outside [0, Nyquist={nyquist}]")
    geom = config.geometry()
    n_v = 2
    n_x = geom.n_cells
    t = config.dt * np.arange(config.n_t)
    signal = np.zeros((config.n_t, n_x * n_v))
    if config.components:
        pats = pattern_library(geom, max(c.pattern for c in config.components) + 1, n_v)
        walk_rng = np.random.default_rng([seed, 1])
        for c in config.components:
            phase = c.phase
            if c.phase_diffusion > 0:
                steps = walk_rng.normal(0.0, c.phase_diffusion * math.sqrt(config.dt), config.n_t)
                phase = c.phase + np.cumsum(steps)
            phasor = np.exp(1j * (2 * np.pi * c.frequency * t + phase))
            signal += c.amplitude * np.real(phasor[:, None] * pats[c.pattern][None, :])
    fluid_dof = np.tile(geom.fluid, n_v)
    sigma = config.noise_amplitude
    if config.snr_db is not None:
        power = float(np.mean(signal[:, fluid_dof] ** 2))
        sigma = math.sqrt(power / 10.0 ** (config.snr_db / 10.0))
    rng = np.random.default_rng(seed)
    if sigma > 0:
        signal += sigma * rng.standard_normal(signal.shape)
    # mean shear profile on u only
    zeta = (np.arange(geom.nz) + 0.5) / geom.nz
    profile = np.repeat(config.mean_speed * zeta, geom.nx)
    signal[:, :n_x] += profile[None, :]
    signal[:, ~fluid_dof] = 0.0

    vel = signal.reshape(config.n_t, n_v, n_x).transpose(0, 2, 1)
    conc = None
    if config.with_concentration:
        conc = concentration_ground_truth(vel, geom, config.conc_offset, config.conc_u, config.conc_w)
    meta = DatasetMeta(dt=config.dt, u_ref=config.u_ref, h_ref=config.h_ref, n_v=n_v)
    return SnapshotDataset(geom, meta, np.ascontiguousarray(vel), conc, t)


def concentration_ground_truth(velocity, geometry: GridGeometry, offset, cu, cw):
    """Positive affine response of ``(u, w)`` clipped at zero, smoothed by a 3x3 box."""
    g = geometry
    raw = np.maximum(0.0, offset + cu * velocity[..., 0] + cw * velocity[..., 1])
    raw = raw.reshape(-1, g.nz, g.nx) * g.mask[None]
    smooth = ndimage.uniform_filter(raw, size=(1, 3, 3), mode="constant", cval=0.0)
    smooth = smooth * g.mask[None]
    return smooth.reshape(velocity.shape[0], g.n_cells)
