import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from spodrom.dataset import DatasetMeta, GridGeometry, PlantedComponent, SnapshotDataset, SynthConfig, \
    compute_fluctuations, pattern_library, synthesize_flow
from spodrom.errors import CorruptFileError, FormatError, InsufficientDataError
from spodrom.spod import (SpodParams, compute_spod, csd_direct_oracle, eigenvalue_confidence,
                          load_basis, mean_tke, plan_blocks, resolved_frequencies, spectrum_table,
                          spod_at_frequency, weighted_csd_trace, windowed_block_dft, write_basis)


def test_plan_blocks_cases():
    p = plan_blocks(8, 4, 2)
    assert p.n_blk == 3 and list(p.starts) == [0, 2, 4]
    assert plan_blocks(4, 4, 0).n_blk == 1
    assert plan_blocks(72000, 4096, 2048).n_blk == 34
    with pytest.raises(InsufficientDataError):
        plan_blocks(3, 4, 0)
    with pytest.raises(ValueError):
        plan_blocks(10, 4, 4)


@given(st.integers(2, 400), st.integers(1, 64), st.data())
def test_plan_blocks_fit(n_t, n_fft, data):
    n_ovlp = data.draw(st.integers(0, n_fft - 1))
    if n_t < n_fft:
        return
    p = plan_blocks(n_t, n_fft, n_ovlp)
    assert p.starts[-1] + n_fft <= n_t
    # one more block would not fit
    assert p.starts[-1] + (n_fft - n_ovlp) + n_fft > n_t


def test_frequency_grid():
    g = resolved_frequencies(4, 1.0)
    np.testing.assert_array_equal(g.freqs, [0.0, 0.25, 0.5])
    g = resolved_frequencies(2, 1.0)
    np.testing.assert_array_equal(g.freqs, [0.0, 0.5])
    g = resolved_frequencies(4096, 0.001)
    assert g.reduced(g.df, h_ref=0.1, u_ref=1.5) == pytest.approx(0.016, rel=0.02)
    assert g.n_fc == 2049
    with pytest.raises(ValueError):
        resolved_frequencies(5, 1.0)


def test_dft_pure_tone_rectangular():
    n = 16
    t = np.arange(n)
    q = np.cos(2 * np.pi * t / n)[:, None]
    plan = plan_blocks(n, n, 0)
    qhat = windowed_block_dft(q, plan, SpodParams(n, 0, "rectangular"), dt=1.0)
    mag = np.abs(qhat[:, 0, 0])
    assert mag[1] > 1.0
    assert np.max(np.delete(mag, 1)) < 1e-10


def test_dft_zero_input():
    plan = plan_blocks(16, 8, 4)
    qhat = windowed_block_dft(np.zeros((16, 3)), plan, SpodParams(8, 4), dt=1.0)
    assert np.all(qhat == 0)


def test_dft_hamming_constant_direct_sum():
    n, dt, c = 8, 0.25, 2.5
    params = SpodParams(n, 0, "hamming")
    qhat = windowed_block_dft(np.full((n, 1), c), plan_blocks(n, n, 0), params, dt=dt)
    # periodic Hamming written out by hand, DFT bin 0 by direct summation
    w = [0.54 - 0.46 * np.cos(2 * np.pi * j / n) for j in range(n)]
    scale = dt / np.sqrt(sum(x * x for x in w) * dt)
    assert qhat[0, 0, 0].real == pytest.approx(scale * sum(c * x for x in w), rel=1e-13)


def test_rank_one_realization(rng):
    v = rng.standard_normal(10) + 1j * rng.standard_normal(10)
    q = np.zeros((10, 4), complex)
    q[:, 2] = v
    w = rng.random(10) + 0.5
    modes, lam = spod_at_frequency(q, w)
    assert lam[0] > 0 and np.all(lam[1:] == 0)
    assert np.all(modes[:, 1:] == 0)
    unit = v / np.sqrt(np.real(np.vdot(v, w * v)))
    assert abs(abs(np.vdot(modes[:, 0], w * unit)) - 1) < 1e-12
    lam_o = csd_direct_oracle(q, w)[1]
    assert lam_o[0] == pytest.approx(lam[0], rel=1e-10)


def test_random_matrix_matches_oracle(rng):
    q = rng.standard_normal((12, 4)) + 1j * rng.standard_normal((12, 4))
    w = rng.random(12) + 0.1
    modes, lam = spod_at_frequency(q, w)
    m_o, lam_o = csd_direct_oracle(q, w)
    np.testing.assert_allclose(lam, lam_o[:4], rtol=1e-8)
    assert np.max(np.abs(lam_o[4:])) < 1e-10 * lam_o[0]
    assert np.max(subspace_angles(np.sqrt(w)[:, None] * modes,
                                  np.sqrt(w)[:, None] * m_o[:, :4])) < 1e-6


def test_orthogonal_columns_degenerate(rng):
    a = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    basis, _ = np.linalg.qr(a)
    q = basis[:, :2] * 3.0
    modes, lam = spod_at_frequency(q, np.ones(8))
    assert lam[0] == pytest.approx(lam[1], rel=1e-12)
    assert np.max(subspace_angles(modes, q)) < 1e-8


def test_oracle_random_20x5_and_psd(rng):
    q = rng.standard_normal((20, 5)) + 1j * rng.standard_normal((20, 5))
    w = np.ones(20)
    lam = spod_at_frequency(q, w)[1]
    lam_o = csd_direct_oracle(q, w)[1]
    np.testing.assert_allclose(lam, lam_o[:5], rtol=1e-8)
    assert np.all(lam_o >= -1e-12 * lam_o[0])


@given(st.integers(1, 40), st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
def test_snapshot_method_properties(n_xv, n_blk, seed):
    r = np.random.default_rng(seed)
    q = r.standard_normal((n_xv, n_blk)) + 1j * r.standard_normal((n_xv, n_blk))
    w = r.random(n_xv) + 0.05
    modes, lam = spod_at_frequency(q, w)
    assert np.all(np.diff(lam) <= 0)
    live = lam > 1e-12 * lam[0]
    phi = modes[:, live]
    gram = phi.conj().T @ (w[:, None] * phi)
    assert np.max(np.abs(gram - np.eye(phi.shape[1]))) <= 1e-8
    assert np.sum(lam) == pytest.approx(weighted_csd_trace(q, w), rel=1e-8)
    lam_o = csd_direct_oracle(q, w)[1]
    np.testing.assert_allclose(lam[live], lam_o[:live.sum()], rtol=1e-8)


def _planted(n_t=1024, snr=None, comps=None, seed=0):
    comps = comps or [PlantedComponent(0, 8 / 64, 1.0)]
    return synthesize_flow(SynthConfig(nx=8, nz=6, n_t=n_t, dx=0.125, dz=0.125, components=comps,
                                       snr_db=snr, with_concentration=False), seed)


def test_single_tone_recovered():
    data = _planted(snr=20.0)
    fl, _ = compute_fluctuations(data)
    b = compute_spod(fl, SpodParams(64, 32))
    k = 8
    assert b.eigenvalues[k, 0] >= 0.99 * b.eigenvalues[k].sum()
    pat = pattern_library(data.geometry, 1)[0]
    assert abs(np.vdot(b.mode(k, 0), b.weight * pat)) >= 0.99
    # the planted bin dominates every other bin
    assert np.argmax(b.eigenvalues[:, 0]) == k


def test_white_noise_flat_spectrum():
    totals = []
    for seed in range(6):
        g = GridGeometry(4, 2, 1.0, 1.0)
        v = np.random.default_rng(seed).standard_normal((2048, 8, 2))
        d = SnapshotDataset(g, DatasetMeta(dt=1.0), v)
        b = compute_spod(compute_fluctuations(d)[0], SpodParams(32, 16))
        totals.append(b.eigenvalues.sum(axis=1))
    mean = np.mean(totals, axis=0)[1:-1]
    # interior bins: sum of 16 components of a white spectrum, unit level per component
    expected = 16.0
    n_blk = b.n_blk
    # chi-squared spread of the seed average; 50% overlap leaves about half the
    # blocks independent
    sigma = expected / np.sqrt(0.5 * n_blk * 16 * 6)
    assert np.all(np.abs(mean - expected) < 3 * sigma)


def test_zero_dataset():
    g = GridGeometry(3, 2, 1.0, 1.0)
    d = SnapshotDataset(g, DatasetMeta(dt=1.0), np.zeros((64, 6, 2)))
    b = compute_spod(d, SpodParams(16, 8))
    assert np.all(b.eigenvalues == 0) and np.all(b.modes == 0)


def test_single_block_warns():
    g = GridGeometry(3, 2, 1.0, 1.0)
    v = np.random.default_rng(0).standard_normal((16, 6, 2))
    with pytest.warns(RuntimeWarning):
        compute_spod(SnapshotDataset(g, DatasetMeta(dt=1.0), v), SpodParams(16, 0))


def test_confidence_against_table():
    # published chi-squared quantiles for 10 degrees of freedom
    lo, hi = eigenvalue_confidence(1.0, 5, 0.95)
    assert lo == pytest.approx(10 / 20.483, rel=1e-3)
    assert hi == pytest.approx(10 / 3.247, rel=1e-3)
    lo34, hi34 = eigenvalue_confidence(1.0, 34)
    assert lo34 < 1 < hi34
    assert hi - lo > hi34 - lo34
    widths = [np.subtract(*eigenvalue_confidence(1.0, n)[::-1]) for n in (2, 4, 8, 34, 100)]
    assert np.all(np.diff(widths) < 0)
    lo_big, hi_big = eigenvalue_confidence(1.0, 10 ** 6)
    assert hi_big - lo_big < 1e-2


def test_spod_properties_on_planted(small_basis, small_fluct):
    b = small_basis
    for k in range(b.n_fc):
        live = ~b.rank_deficient[k]
        phi = b.modes[k][:, live]
        gram = phi.conj().T @ (b.weight[:, None] * phi)
        assert np.max(np.abs(gram - np.eye(phi.shape[1]))) <= 1e-8
    qhat = windowed_block_dft(small_fluct, plan_blocks(small_fluct.n_t, 32, 16), b.params)
    for k in range(b.n_fc):
        assert b.eigenvalues[k].sum() == pytest.approx(weighted_csd_trace(qhat[k], b.weight),
                                                       rel=1e-8)


def test_tke_identity(small_basis, small_fluct):
    tke = mean_tke(small_fluct, small_basis.weight)
    assert small_basis.spectral_energy() == pytest.approx(2 * tke, rel=0.05)


def test_determinism(small_fluct):
    a = compute_spod(small_fluct, SpodParams(32, 16))
    b = compute_spod(small_fluct, SpodParams(32, 16))
    assert a.eigenvalues.tobytes() == b.eigenvalues.tobytes()


def test_basis_file_roundtrip(tmp_path, small_basis):
    p = tmp_path / "b.spob"
    write_basis(p, small_basis)
    b = load_basis(p)
    assert b.modes.tobytes() == small_basis.modes.tobytes()
    assert b.eigenvalues.tobytes() == small_basis.eigenvalues.tobytes()
    np.testing.assert_array_equal(b.weight, small_basis.weight)
    assert b.params.window == "hamming" and b.dt == small_basis.dt
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(CorruptFileError):
        load_basis(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_basis(p)


def test_spectrum_table(small_basis):
    header, rows = spectrum_table(small_basis, h_ref=0.5, u_ref=2.0)
    assert len(rows) == small_basis.n_fc
    assert header[:2] == ["freq", "reduced_freq"] and len(header) == 2 + small_basis.n_blk + 2
    r = rows[3]
    assert r[1] == pytest.approx(r[0] * 0.25)
    assert r[-2] < r[2] < r[-1]


def test_params_validation():
    with pytest.raises(ValueError):
        SpodParams(7, 0)
    with pytest.raises(ValueError):
        SpodParams(8, 8)
    with pytest.raises(ValueError):
        SpodParams(8, 0, "blackman")
