"""Welch-blocked spectral POD.

The snapshot stream is cut into overlapping blocks, each block is windowed
and Fourier transformed, and at every retained non-negative frequency the
ensemble of block realizations is decomposed with the method of snapshots.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, signal, stats

from .dataset import SnapshotDataset
from .errors import CorruptFileError, FormatError, InsufficientDataError, InvalidDataError, NumericError

WINDOWS = ("hamming", "hann", "rectangular")
RANK_TOL = 1e-12
ORACLE_MAX_SIZE = 4096


@dataclass
class SpodParams:
    n_fft: int
    n_ovlp: int
    window: str = "hamming"
    weight: float | np.ndarray | None = None

    def __post_init__(self):
        self.n_fft = int(self.n_fft)
        self.n_ovlp = int(self.n_ovlp)
        if self.n_fft < 2:
            raise ValueError("n_fft must be at least 2")
        if self.n_fft % 2:
            raise ValueError("n_fft must be even")
        if not 0 <= self.n_ovlp < self.n_fft:
            raise ValueError("overlap must satisfy 0 <= n_ovlp < n_fft")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")

    def window_values(self):
        if self.window == "rectangular":
            return np.ones(self.n_fft)
        # periodic (DFT-even) windows, as is usual for Welch estimates
        return signal.get_window(self.window, self.n_fft, fftbins=True)


@dataclass
class BlockPlan:
    n_blk: int
    starts: np.ndarray


@dataclass
class FrequencyGrid:
    freqs: np.ndarray
    df: float

    @property
    def n_fc(self):
        return len(self.freqs)

    def reduced(self, f=None, h_ref=1.0, u_ref=1.0):
        """Nondimensional frequency ``f * h_ref / u_ref`` (all bins when ``f`` is None)."""
        f = self.freqs if f is None else np.asarray(f)
        return f * h_ref / u_ref

    def fold_factors(self):
        """Multiplicity of each bin once the discarded negative partners are folded in."""
        fac = np.full(self.n_fc, 2.0)
        fac[0] = 1.0
        fac[-1] = 1.0  # Nyquist (n_fft is even)
        return fac


@dataclass
class SpodBasis:
    """Per-frequency modes ``[n_fc, n_xv, n_blk]`` and descending eigenvalues ``[n_fc, n_blk]``."""

    params: SpodParams
    grid: FrequencyGrid
    modes: np.ndarray
    eigenvalues: np.ndarray
    weight: np.ndarray
    dt: float

    @property
    def n_fc(self):
        return self.modes.shape[0]

    @property
    def n_xv(self):
        return self.modes.shape[1]

    @property
    def n_blk(self):
        return self.modes.shape[2]

    @property
    def rank_deficient(self):
        """Boolean ``[n_fc, n_blk]``: modes zeroed because their eigenvalue is negligible."""
        return _deficient(self.eigenvalues)

    def mode(self, k, n):
        return self.modes[k, :, n]

    def spectral_energy(self):
        """Two-sided integral of the eigenvalue spectrum, ``sum_k sum_n lambda * df`` with
        interior bins counted twice for their negative-frequency partners."""
        return float(np.sum(self.grid.fold_factors()[:, None] * self.eigenvalues) * self.grid.df)


def _deficient(lam):
    lam_max = np.max(lam, axis=-1, keepdims=True)
    return lam <= RANK_TOL * lam_max


def plan_blocks(n_t, n_fft, n_ovlp) -> BlockPlan:
    """Block count ``floor((n_t - n_ovlp) / (n_fft - n_ovlp))`` and block start indices."""
    if n_t < n_fft:
        raise InsufficientDataError(f"{n_t} snapshots cannot fill one block of {n_fft}")
    if not 0 <= n_ovlp < n_fft:
        raise ValueError("overlap must satisfy 0 <= n_ovlp < n_fft")
    step = n_fft - n_ovlp
    n_blk = (n_t - n_ovlp) // step
    return BlockPlan(n_blk, step * np.arange(n_blk))


def resolved_frequencies(n_fft, dt) -> FrequencyGrid:
    if n_fft < 2:
        raise ValueError("n_fft must be at least 2")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_fft % 2:
        raise ValueError("n_fft must be even")
    n_fc = -(-n_fft // 2) + 1
    return FrequencyGrid(np.arange(n_fc) / (n_fft * dt), 1.0 / (n_fft * dt))


def windowed_block_dft(fluct, plan: BlockPlan, params: SpodParams, dt=None):
    """Fourier realizations regrouped by frequency: complex ``[n_fc, n_xv, n_blk]``.

    ``fluct`` is a :class:`SnapshotDataset` of fluctuations or a time-major
    ``[n_t, n_xv]`` array (then ``dt`` is required).  Each block is scaled by
    ``dt / sqrt(sum(w**2) * dt)`` so that eigenvalues are two-sided spectral
    densities.
    """
    if isinstance(fluct, SnapshotDataset):
        q = fluct.snapshot_matrix()
        dt = fluct.meta.dt
    else:
        q = np.asarray(fluct)
        if dt is None:
            raise ValueError("dt is required for raw arrays")
    n_t = q.shape[0]
    n_fft = params.n_fft
    if plan.n_blk < 1 or plan.starts[-1] + n_fft > n_t:
        raise RuntimeError("block plan does not fit the data")
    win = params.window_values()
    scale = dt / np.sqrt(np.sum(win ** 2) * dt)
    n_fc = n_fft // 2 + 1
    out = np.empty((n_fc, q.shape[1], plan.n_blk), dtype=np.complex128)
    for i, s in enumerate(plan.starts):
        block = q[s:s + n_fft] * win[:, None]
        out[:, :, i] = scale * np.fft.rfft(block, axis=0)
    return out


def spod_at_frequency(qhat, weight):
    """Method-of-snapshots eigenpairs for one frequency.

    Solves ``Q^* W Q psi = lambda psi / (n_blk - 1)`` and recovers
    W-orthonormal modes ``Q psi lambda^{-1/2} / sqrt(n_blk - 1)``.  Columns
    whose eigenvalue is below ``1e-12 * lambda_max`` are returned as zeros.

    Returns ``(modes, eigenvalues)`` with eigenvalues in descending order.
    """
    qhat = np.asarray(qhat, dtype=np.complex128)
    if qhat.ndim != 2 or qhat.shape[1] < 1:
        raise ValueError("qhat must be a matrix with at least one column")
    if not np.all(np.isfinite(qhat)):
        raise InvalidDataError("non-finite Fourier realizations")
    n_blk = qhat.shape[1]
    w = _weight_vector(weight, qhat.shape[0])
    norm = _ensemble_norm(n_blk)
    m = (qhat.conj().T @ (w[:, None] * qhat)) / norm
    m = 0.5 * (m + m.conj().T)
    try:
        lam, psi = linalg.eigh(m)
    except linalg.LinAlgError as exc:
        raise NumericError(f"Hermitian eigensolver failed: {exc}") from exc
    order = np.argsort(-lam, kind="stable")
    lam, psi = lam[order], psi[:, order]
    lam = np.where(lam > 0, lam, 0.0)
    keep = ~_deficient(lam)
    modes = np.zeros_like(qhat)
    if keep.any():
        modes[:, keep] = (qhat @ psi[:, keep]) / np.sqrt(lam[keep] * norm)[None, :]
    return modes, lam


def csd_direct_oracle(qhat, weight):
    """Eigenpairs of the full weighted CSD ``S W`` with ``S = Q Q^* / (n_blk - 1)``.

    Test-scale reference for :func:`spod_at_frequency`; returns all
    ``n_xv`` eigenvalues (descending) and the corresponding W-normalized
    eigenvectors.
    """
    qhat = np.asarray(qhat, dtype=np.complex128)
    n_xv, n_blk = qhat.shape
    if n_xv > ORACLE_MAX_SIZE:
        raise ValueError(f"direct CSD oracle refuses n_xv={n_xv} > {ORACLE_MAX_SIZE}")
    w = _weight_vector(weight, n_xv)
    s = (qhat @ qhat.conj().T) / _ensemble_norm(n_blk)
    sw = np.sqrt(w)
    sym = sw[:, None] * s * sw[None, :]
    lam, v = linalg.eigh(0.5 * (sym + sym.conj().T))
    order = np.argsort(-lam, kind="stable")
    lam, v = lam[order], v[:, order]
    modes = np.zeros_like(v)
    pos = lam > RANK_TOL * max(lam[0], 0.0)
    # phi = S W^{1/2} v / lambda also covers zero-weight entries
    modes[:, pos] = (s @ (sw[:, None] * v[:, pos])) / lam[pos][None, :]
    return modes, lam


def compute_spod(fluct: SnapshotDataset, params: SpodParams, weight=None) -> SpodBasis:
    """Full SPOD of a fluctuation dataset.

    The weight defaults to ``params.weight`` and then to the grid quadrature
    (``dx*dz`` on fluid cells, zero on solid ones).
    """
    if weight is None:
        weight = params.weight
    if weight is None:
        weight = fluct.geometry.quadrature_weights(fluct.n_v)
    w = _weight_vector(weight, fluct.n_xv)
    plan = plan_blocks(fluct.n_t, params.n_fft, params.n_ovlp)
    grid = resolved_frequencies(params.n_fft, fluct.meta.dt)
    qhat = windowed_block_dft(fluct, plan, params)
    modes = np.empty_like(qhat)
    lam = np.empty((grid.n_fc, plan.n_blk))
    if plan.n_blk == 1:
        warnings.warn("single block: CSD normalization falls back to 1", RuntimeWarning, stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k in range(grid.n_fc):
            modes[k], lam[k] = spod_at_frequency(qhat[k], w)
    return SpodBasis(params, grid, modes, lam, w, fluct.meta.dt)


def eigenvalue_confidence(lam, n_blk, level=0.95):
    """Chi-squared interval for a spectral estimate with ``2 * n_blk`` degrees of freedom."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if n_blk < 2:
        raise ValueError("confidence intervals need at least two blocks")
    nu = 2 * n_blk
    lam = np.asarray(lam, dtype=float)
    lo = lam * nu / stats.chi2.ppf(0.5 * (1.0 + level), nu)
    hi = lam * nu / stats.chi2.ppf(0.5 * (1.0 - level), nu)
    return lo, hi


def weighted_csd_trace(qhat, weight):
    """``trace(W S)`` at one frequency; equals the eigenvalue sum."""
    qhat = np.asarray(qhat)
    w = _weight_vector(weight, qhat.shape[0])
    return float(np.sum(w[:, None] * np.abs(qhat) ** 2) / _ensemble_norm(qhat.shape[1]))


def mean_tke(fluct, weight):
    """Time-mean of ``0.5 * <q', q'>_W``: the TKE integrated with the quadrature weights."""
    q = fluct.snapshot_matrix() if isinstance(fluct, SnapshotDataset) else np.asarray(fluct)
    w = _weight_vector(weight, q.shape[1])
    return 0.5 * float(np.mean(q ** 2 @ w))


def _ensemble_norm(n_blk):
    if n_blk == 1:
        warnings.warn("single realization: using normalization 1 instead of 1/(n_blk-1)",
                      RuntimeWarning, stacklevel=3)
        return 1.0
    return float(n_blk - 1)


def _weight_vector(weight, n):
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        w = np.full(n, float(w))
    if w.shape != (n,):
        raise ValueError(f"weight has shape {w.shape}, expected ({n},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    return w


# --------------------------------------------------------------------------
# SPOB basis file and spectrum export

SPOB_MAGIC = b"SPOB"
SPOB_VERSION = 1
_SPOB_HEADER = struct.Struct("<4sIIIIIIBd")


def write_basis(path, basis: SpodBasis):
    p = basis.params
    header = _SPOB_HEADER.pack(SPOB_MAGIC, SPOB_VERSION, basis.n_fc, basis.n_blk, basis.n_xv,
                               p.n_fft, p.n_ovlp, WINDOWS.index(p.window), basis.dt)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(basis.weight, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.modes, dtype="<c16").tobytes())


def load_basis(path) -> SpodBasis:
    raw = Path(path).read_bytes()
    if len(raw) < _SPOB_HEADER.size:
        raise CorruptFileError("file shorter than the SPOB header")
    magic, version, n_fc, n_blk, n_xv, n_fft, n_ovlp, win, dt = _SPOB_HEADER.unpack_from(raw)
    if magic != SPOB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SPOB_MAGIC!r}")
    if version != SPOB_VERSION:
        raise FormatError(f"unsupported SPOB version {version}")
    expected = _SPOB_HEADER.size + 8 * n_xv + 8 * n_fc * n_blk + 16 * n_fc * n_xv * n_blk
    if len(raw) != expected:
        raise CorruptFileError(f"file has {len(raw)} bytes, header implies {expected}")
    off = _SPOB_HEADER.size
    weight = np.frombuffer(raw, "<f8", n_xv, off).copy()
    off += 8 * n_xv
    lam = np.frombuffer(raw, "<f8", n_fc * n_blk, off).reshape(n_fc, n_blk).copy()
    off += 8 * n_fc * n_blk
    modes = np.frombuffer(raw, "<c16", n_fc * n_xv * n_blk, off).reshape(n_fc, n_xv, n_blk).copy()
    params = SpodParams(n_fft, n_ovlp, WINDOWS[win])
    grid = resolved_frequencies(n_fft, dt)
    if grid.n_fc != n_fc:
        raise CorruptFileError("frequency count disagrees with n_fft")
    return SpodBasis(params, grid, modes, lam, weight, dt)


def spectrum_table(basis: SpodBasis, h_ref=1.0, u_ref=1.0, level=0.95):
    """Rows of ``freq, reduced_freq, lambda_1..lambda_nblk, ci_lo_1, ci_hi_1``."""
    header = (["freq", "reduced_freq"] + [f"lambda_{i + 1}" for i in range(basis.n_blk)]
              + ["ci_lo_1", "ci_hi_1"])
    if basis.n_blk >= 2:
        lo, hi = eigenvalue_confidence(basis.eigenvalues[:, 0], basis.n_blk, level)
    else:
        lo = hi = np.full(basis.n_fc, np.nan)
    red = basis.grid.reduced(h_ref=h_ref, u_ref=u_ref)
    rows = [[basis.grid.freqs[k], red[k], *basis.eigenvalues[k], lo[k], hi[k]]
            for k in range(basis.n_fc)]
    return header, rows
