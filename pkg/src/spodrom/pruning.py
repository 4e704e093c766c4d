"""Two-stage reduction of the SPOD space.

1. Rank frequencies by the gap between their two leading eigenvalues and
   keep the smallest prefix whose relative information content (RIC)
   reaches ``eps_ric``.
2. Sweep the surviving modes from most to least energetic and drop every
   mode whose similarity ``gamma = |<phi_a, phi_b>_W|`` to an already kept
   mode exceeds ``eps_gamma``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .projection import nmse, project_coefficients, reconstruct_matrix

NORM_DRIFT = 1e-8
# round-off allowance when comparing gamma to the threshold
GAMMA_TOL = 1e-10


@dataclass
class ModeSelection:
    kept: list
    freq_set: list
    eps_ric: float
    eps_gamma: float
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.kept = [(int(k), int(n)) for k, n in self.kept]
        self.freq_set = [int(k) for k in self.freq_set]
        if len(set(self.kept)) != len(self.kept):
            raise ValueError("duplicate entries in the kept set")
        fs = set(self.freq_set)
        if any(k not in fs for k, _ in self.kept):
            raise ValueError("kept mode outside the selected frequency set")

    @property
    def n_f(self):
        return len(self.freq_set)

    @property
    def n_m(self):
        return len(self.kept)

    def to_dict(self):
        return {
            "kept": [list(p) for p in self.kept],
            "freq_set": self.freq_set,
            "eps_ric": self.eps_ric,
            "eps_gamma": self.eps_gamma,
            "n_f": self.n_f,
            "n_m": self.n_m,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kept"], d["freq_set"], d["eps_ric"], d["eps_gamma"], d.get("provenance", []))


def write_selection(path, sel: ModeSelection):
    Path(path).write_text(json.dumps(sel.to_dict(), indent=1))


def load_selection(path) -> ModeSelection:
    return ModeSelection.from_dict(json.loads(Path(path).read_text()))


def frequency_rank_by_separation(basis):
    """Frequency indices sorted by descending ``|lambda_1 - lambda_2|`` (ties: ascending index).

    Returns ``(order, delta)`` where ``delta`` is indexed by frequency.
    """
    if basis.n_blk < 2:
        raise ValueError("eigenvalue separation needs at least two blocks")
    lam = basis.eigenvalues
    delta = np.abs(lam[:, 0] - lam[:, 1])
    order = np.argsort(-delta, kind="stable")
    return order, delta


def ric_curve(basis):
    """``RIC(n)`` for ``n = 1..n_fc`` following the separation ranking."""
    order, _ = frequency_rank_by_separation(basis)
    energy = basis.eigenvalues.sum(axis=1)[order]
    cum = np.cumsum(energy)
    if cum[-1] <= 0:
        raise ValueError("basis carries no energy")
    return cum / cum[-1]


def ric(basis, n):
    if not 1 <= n <= basis.n_fc:
        raise ValueError(f"n must lie in [1, {basis.n_fc}]")
    return float(ric_curve(basis)[n - 1])


def select_frequencies(basis, eps_ric):
    """Top-ranked frequencies forming the smallest prefix with ``RIC >= eps_ric``."""
    if not 0.0 < eps_ric <= 1.0:
        raise ValueError("eps_ric must lie in (0, 1]")
    order, _ = frequency_rank_by_separation(basis)
    if eps_ric >= 1.0:
        # round-off can let the curve touch 1 before the last (near-empty) bins
        return [int(k) for k in order]
    curve = ric_curve(basis)
    n = int(np.searchsorted(curve, eps_ric, side="left")) + 1
    n = min(n, basis.n_fc)
    return [int(k) for k in order[:n]]


def _unit(v, weight):
    v = np.asarray(v, dtype=np.complex128)
    nrm = np.sqrt(np.real(np.vdot(v, weight * v)))
    if nrm == 0.0:
        raise ValueError("similarity of a zero vector is undefined")
    if abs(nrm - 1.0) > NORM_DRIFT:
        v = v / nrm
    return v


def similarity(mode_a, mode_b, weight):
    """``gamma = |<a, b>_W|`` for W-unit vectors (renormalized if they drifted)."""
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        w = np.full(len(mode_a), float(w))
    a = _unit(mode_a, w)
    b = _unit(mode_b, w)
    return float(min(1.0, abs(np.vdot(a, w * b))))


def prune_by_similarity(basis, freq_set, eps_gamma) -> ModeSelection:
    """Greedy similarity deduplication over every rank at the given frequencies.

    Candidates are visited by descending eigenvalue (ties: frequency rank
    order, then mode rank); each is kept iff its similarity to every mode
    kept so far is ``<= eps_gamma``.  Rank-deficient (zeroed) modes never
    enter the pool.  ``kept`` is returned in ``(k, n)`` order.
    """
    if not 0.0 <= eps_gamma <= 1.0:
        raise ValueError("eps_gamma must lie in [0, 1]")
    freq_set = [int(k) for k in freq_set]
    deficient = basis.rank_deficient
    cands = [(k, n) for k in freq_set for n in range(basis.n_blk) if not deficient[k, n]]
    lam = np.array([basis.eigenvalues[k, n] for k, n in cands])
    order = np.argsort(-lam, kind="stable")
    cands = [cands[i] for i in order]

    try:
        rank_of = {int(k): i for i, k in enumerate(frequency_rank_by_separation(basis)[0])}
        curve = ric_curve(basis)
    except ValueError:
        rank_of, curve = {k: i for i, k in enumerate(freq_set)}, None

    sw = np.sqrt(basis.weight)
    kept_vecs = np.empty((basis.n_xv, len(cands)), dtype=np.complex128)
    kept, prov = [], []
    for k, n in cands:
        v = sw * _unit(basis.modes[k, :, n], basis.weight)
        nk = len(kept)
        gmax = float(np.max(np.abs(kept_vecs[:, :nk].conj().T @ v))) if nk else 0.0
        if eps_gamma >= 1.0 or gmax <= eps_gamma + GAMMA_TOL:
            kept_vecs[:, nk] = v
            kept.append((k, n))
            r = rank_of.get(k, -1)
            prov.append({"k": k, "n": n, "delta_rank": r,
                         "ric_at_inclusion": None if curve is None else float(curve[r]),
                         "max_gamma": min(gmax, 1.0)})
    pairs = sorted(zip(kept, prov))
    return ModeSelection([p[0] for p in pairs], freq_set, float("nan"), eps_gamma,
                         [p[1] for p in pairs])


def select_modes(basis, eps_ric, eps_gamma) -> ModeSelection:
    """Both criteria in sequence."""
    freqs = select_frequencies(basis, eps_ric)
    sel = prune_by_similarity(basis, freqs, eps_gamma)
    sel.eps_ric = eps_ric
    return sel


def tke_fraction(basis, kept):
    fold = basis.grid.fold_factors()
    total = float(np.sum(fold[:, None] * basis.eigenvalues))
    part = sum(fold[k] * basis.eigenvalues[k, n] for k, n in kept)
    return part / total


def pruning_sensitivity(basis, fluct, eps_grid, eps_ric=1.0):
    """Rows ``{eps_gamma, n_m, tke_fraction, nmse}`` over a grid of similarity thresholds."""
    eps_grid = list(eps_grid)
    if not eps_grid:
        raise ValueError("empty threshold grid")
    freqs = select_frequencies(basis, eps_ric)
    q = fluct.snapshot_matrix()
    rows = []
    for eps in eps_grid:
        sel = prune_by_similarity(basis, freqs, eps)
        coeffs = project_coefficients(basis, sel, q)
        rec, _ = reconstruct_matrix(basis, coeffs.mode_index, coeffs.values)
        rows.append({"eps_gamma": float(eps), "n_m": sel.n_m,
                     "tke_fraction": tke_fraction(basis, sel.kept), "nmse": nmse(q, rec)})
    return rows
