"""Time-domain expansion coefficients and field reconstruction.

Modes at different frequencies are not orthogonal, so coefficients come
from the weighted oblique projection ``A = (Phi^* W Phi)^{-1} Phi^* W Q``.

Only non-negative frequencies are stored.  For real snapshots each interior
bin has a conjugate partner at the mirrored negative frequency; the
projection includes those partners explicitly (the conjugated modes), and a
real field is rebuilt as ``Re(Phi_edge A_edge) + 2 Re(Phi_int A_int)`` where
*edge* means the zero and Nyquist bins.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .dataset import MeanField, SnapshotDataset, add_mean
from .errors import CorruptFileError, FormatError, NumericError, UndefinedMetricError

log = logging.getLogger(__name__)

COND_LIMIT = 1e10
PSEUDO_CUTOFF = 1e-10


@dataclass
class GramOperator:
    """Factorized ``Phi^* W Phi`` for one mode set.

    ``method`` is ``"cholesky"`` or ``"pseudo"`` (truncated SVD of
    ``W^{1/2} Phi``); ``condition`` is the 2-norm condition estimate of the Gram.
    """

    sqrt_weight: np.ndarray
    modes: np.ndarray
    method: str
    condition: float
    factor: object = None
    svd: tuple | None = None

    @classmethod
    def build(cls, modes, weight):
        modes = np.asarray(modes, dtype=np.complex128)
        sw = np.sqrt(np.asarray(weight, dtype=float))
        b = sw[:, None] * modes
        n_eff = int(np.count_nonzero(sw))
        m = modes.shape[1]
        if m == 0:
            raise ValueError("empty mode set")
        if m <= n_eff:
            gram = b.conj().T @ b
            gram = 0.5 * (gram + gram.conj().T)
            ev = linalg.eigvalsh(gram)
            cond = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
            if cond <= COND_LIMIT:
                try:
                    return cls(sw, modes, "cholesky", cond, linalg.cho_factor(gram, lower=True))
                except linalg.LinAlgError:
                    pass
        else:
            cond = np.inf
        try:
            if m > b.shape[0]:
                # wide: eigendecompose the small outer product B B^* instead of an SVD
                ev, u = linalg.eigh(b @ b.conj().T)
                ev, u = ev[::-1], u[:, ::-1]
                s = np.sqrt(np.clip(ev, 0.0, None))
                vh = None
            else:
                u, s, vh = linalg.svd(b, full_matrices=False)
        except linalg.LinAlgError as exc:
            raise NumericError(f"decomposition of the weighted mode matrix failed: {exc}") from exc
        if s.size == 0 or s[0] == 0:
            raise NumericError("Gram matrix is identically zero")
        # cutoff is relative to the Gram singular values, i.e. s**2
        keep = s ** 2 > PSEUDO_CUTOFF * s[0] ** 2
        log.info("oblique projection falls back to truncated pseudo-solve "
                 "(condition %.3g, rank %d of %d)", cond, int(keep.sum()), m)
        vh = None if vh is None else vh[keep]
        return cls(sw, modes, "pseudo", cond, svd=(u[:, keep], s[keep], vh))

    @property
    def fallback(self):
        return self.method == "pseudo"

    def solve(self, q, rows=None):
        """Coefficients for snapshot columns ``q`` (``[n_xv, n_t]``).

        ``rows`` limits the output to the first ``rows`` modes.
        """
        bq = self.sqrt_weight[:, None] * q
        if self.method == "cholesky":
            rhs = (self.sqrt_weight[:, None] * self.modes).conj().T @ bq
            return linalg.cho_solve(self.factor, rhs)[:rows]
        u, s, vh = self.svd
        if vh is None:
            b = self.sqrt_weight[:, None] * self.modes[:, :rows]
            return b.conj().T @ (u @ ((u.conj().T @ bq) / s[:, None] ** 2))
        return vh[:, :rows].conj().T @ ((u.conj().T @ bq) / s[:, None])


@dataclass
class CoefficientSeries:
    values: np.ndarray
    mode_index: list
    source_basis: str = ""
    fallback: bool = False
    condition: float = float("nan")
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode_index = [(int(k), int(n)) for k, n in self.mode_index]
        if self.values.shape[0] != len(self.mode_index):
            raise ValueError("coefficient rows do not match the mode index")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficients contain non-finite values")

    @property
    def n_m(self):
        return len(self.mode_index)

    @property
    def n_t(self):
        return self.values.shape[1]


def all_modes(basis):
    """Every mode that is not rank-deficient, in ``(k, n)`` order."""
    ok = ~basis.rank_deficient
    return [(k, n) for k in range(basis.n_fc) for n in range(basis.n_blk) if ok[k, n]]


def _mode_index(basis, selection):
    if selection is None or selection == "all":
        return all_modes(basis)
    idx = selection.kept if hasattr(selection, "kept") else selection
    return [(int(k), int(n)) for k, n in idx]


def gather_modes(basis, mode_index):
    ks = np.array([k for k, _ in mode_index], dtype=int)
    ns = np.array([n for _, n in mode_index], dtype=int)
    return basis.modes[ks, :, ns].T


def _interior(basis, mode_index):
    last = basis.n_fc - 1
    return np.array([0 < k < last for k, _ in mode_index], dtype=bool)


def oblique_coefficients(modes, weight, q):
    """Plain oblique projection of complex columns ``q`` onto ``modes``.

    Returns ``(A, gram)``; no conjugate partners are added.
    """
    gram = GramOperator.build(modes, weight)
    return gram.solve(np.asarray(q, dtype=np.complex128)), gram


def conjugate_gram(basis, mode_index):
    phi = gather_modes(basis, mode_index)
    inner = _interior(basis, mode_index)
    aug = np.concatenate([phi, phi[:, inner].conj()], axis=1)
    return GramOperator.build(aug, basis.weight)


def project_coefficients(basis, selection, fluct, gram=None) -> CoefficientSeries:
    """Coefficients ``[n_m, n_t]`` of real fluctuation snapshots on the selected modes.

    ``fluct`` is a :class:`SnapshotDataset` or a time-major ``[n_t, n_xv]``
    real array.  A prebuilt ``gram`` (from :func:`conjugate_gram`) may be
    reused across calls.
    """
    q = fluct.snapshot_matrix() if isinstance(fluct, SnapshotDataset) else np.asarray(fluct)
    if q.ndim != 2 or q.shape[1] != basis.n_xv:
        raise ValueError(f"data has {q.shape[-1]} entries per snapshot, basis has {basis.n_xv}")
    idx = _mode_index(basis, selection)
    if not idx:
        raise ValueError("selection is empty")
    if gram is None:
        gram = conjugate_gram(basis, idx)
    values = np.ascontiguousarray(gram.solve(q.T.astype(np.complex128), rows=len(idx)))
    return CoefficientSeries(values, idx, basis_id(basis), gram.fallback, gram.condition)


def reconstruct_matrix(basis, mode_index, values):
    """Real ``[n_t, n_xv]`` field from coefficients plus the imaginary residual.

    The residual is the largest imaginary magnitude of the zero/Nyquist
    contributions, which must vanish for coefficients of real data.
    """
    values = np.asarray(values)
    if values.shape[0] != len(mode_index):
        raise ValueError("coefficient rows do not match the mode index")
    phi = gather_modes(basis, mode_index)
    inner = _interior(basis, mode_index)
    edge = ~inner
    field_ = np.zeros((values.shape[1], basis.n_xv))
    resid = 0.0
    if inner.any():
        field_ += 2.0 * np.real(phi[:, inner] @ values[inner]).T
    if edge.any():
        part = (phi[:, edge] @ values[edge]).T
        field_ += part.real
        resid = float(np.max(np.abs(part.imag))) if part.size else 0.0
    return field_, resid


def reconstruct(basis, selection, coeffs: CoefficientSeries, like: SnapshotDataset,
                mean: MeanField | None = None):
    """Rebuild snapshots on the grid of ``like``; adds ``mean`` when given.

    Returns ``(dataset, imag_residual)``.
    """
    idx = coeffs.mode_index
    if selection is not None and _mode_index(basis, selection) != idx:
        raise ValueError("coefficients were not produced for this selection")
    mat, resid = reconstruct_matrix(basis, idx, coeffs.values)
    if mat.shape[1] != like.n_xv:
        raise ValueError("basis and template grid differ")
    times = like.times[0] + like.meta.dt * np.arange(mat.shape[0]) if like.n_t else None
    out = like.with_velocity_matrix(_zero_solid(mat, like), times=times)
    if mean is not None:
        out = add_mean(out, mean)
    rms = float(np.sqrt(np.mean(mat ** 2))) if mat.size else 0.0
    if rms > 0 and resid > 1e-8 * rms:
        log.warning("reconstruction imaginary residual %.3g exceeds 1e-8 of field rms", resid)
    return out, resid


def _zero_solid(mat, like):
    fluid = np.tile(like.geometry.fluid, like.n_v)
    mat = mat.copy()
    mat[:, ~fluid] = 0.0
    return mat


def nmse_series(reference, approx):
    """Per-snapshot NMSE; the first axis is time."""
    ref = np.asarray(reference, dtype=float)
    app = np.asarray(approx, dtype=float)
    if ref.shape != app.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {app.shape}")
    axes = tuple(range(1, ref.ndim))
    energy = np.sum(ref ** 2, axis=axes)
    if np.any(energy == 0):
        raise UndefinedMetricError("reference snapshot with zero energy")
    return np.sum((ref - app) ** 2, axis=axes) / energy


def nmse(reference, approx):
    """``sum((ref - approx)**2) / sum(ref**2)`` over the whole array."""
    ref = np.asarray(reference, dtype=float)
    app = np.asarray(approx, dtype=float)
    if ref.shape != app.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {app.shape}")
    energy = float(np.sum(ref ** 2))
    if energy == 0.0:
        raise UndefinedMetricError("reference field has zero energy")
    return float(np.sum((ref - app) ** 2)) / energy


def nrmse(reference, approx):
    return float(np.sqrt(nmse(reference, approx)))


def basis_id(basis):
    """Short content hash identifying a basis."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(basis.eigenvalues).tobytes())
    h.update(np.ascontiguousarray(basis.modes[:, :, :1]).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# SCOF coefficient file

SCOF_MAGIC = b"SCOF"
SCOF_VERSION = 1
_SCOF_HEADER = struct.Struct("<4sIII16s")


def write_coefficients(path, coeffs: CoefficientSeries):
    header = _SCOF_HEADER.pack(SCOF_MAGIC, SCOF_VERSION, coeffs.n_m, coeffs.n_t,
                               coeffs.source_basis.encode()[:16].ljust(16, b"\0"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(coeffs.mode_index, dtype="<u4").reshape(-1, 2).tobytes())
        fh.write(np.ascontiguousarray(coeffs.values, dtype="<c16").tobytes())


def load_coefficients(path) -> CoefficientSeries:
    raw = Path(path).read_bytes()
    if len(raw) < _SCOF_HEADER.size:
        raise CorruptFileError("file shorter than the SCOF header")
    magic, version, n_m, n_t, src = _SCOF_HEADER.unpack_from(raw)
    if magic != SCOF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SCOF_MAGIC!r}")
    if version != SCOF_VERSION:
        raise FormatError(f"unsupported SCOF version {version}")
    expected = _SCOF_HEADER.size + 8 * n_m + 16 * n_m * n_t
    if len(raw) != expected:
        raise CorruptFileError(f"file has {len(raw)} bytes, header implies {expected}")
    off = _SCOF_HEADER.size
    idx = np.frombuffer(raw, "<u4", 2 * n_m, off).reshape(n_m, 2)
    off += 8 * n_m
    vals = np.frombuffer(raw, "<c16", n_m * n_t, off).reshape(n_m, n_t).copy()
    return CoefficientSeries(vals, [tuple(r) for r in idx.tolist()], src.rstrip(b"\0").decode())
