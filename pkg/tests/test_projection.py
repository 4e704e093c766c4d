import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spodrom.dataset import compute_fluctuations
from spodrom.errors import CorruptFileError, UndefinedMetricError
from spodrom.projection import (CoefficientSeries, GramOperator, all_modes, conjugate_gram,
                                load_coefficients, nmse, nmse_series, nrmse, oblique_coefficients,
                                project_coefficients, reconstruct, reconstruct_matrix,
                                write_coefficients)


def test_exact_inverse(rng):
    phi = rng.standard_normal((30, 5)) + 1j * rng.standard_normal((30, 5))
    a0 = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
    w = rng.random(30) + 0.5
    a, gram = oblique_coefficients(phi, w, phi @ a0)
    assert gram.method == "cholesky"
    np.testing.assert_allclose(a, a0, rtol=1e-8, atol=1e-10)
    z, _ = oblique_coefficients(phi, w, np.zeros((30, 3)))
    assert np.all(z == 0)


def test_single_frequency_is_inner_product(small_basis, small_fluct):
    k = 4
    phi = small_basis.modes[k][:, ~small_basis.rank_deficient[k]]
    q = small_fluct.snapshot_matrix().T
    a, _ = oblique_coefficients(phi, small_basis.weight, q)
    direct = np.array([[np.vdot(phi[:, j], small_basis.weight * q[:, t]) for t in range(5)]
                       for j in range(phi.shape[1])])
    np.testing.assert_allclose(a[:, :5], direct, rtol=1e-8, atol=1e-12)


def test_pseudo_fallback_on_duplicate_modes(rng):
    phi = rng.standard_normal((20, 3)) + 0j
    dup = np.concatenate([phi, phi[:, :1]], axis=1)
    g = GramOperator.build(dup, np.ones(20))
    assert g.fallback
    a0 = np.array([1.0, 2.0, 3.0])
    a = g.solve((phi @ a0)[:, None])
    # minimum-norm solution splits the duplicated coefficient
    np.testing.assert_allclose(dup @ a[:, 0], phi @ a0, atol=1e-10)
    np.testing.assert_allclose(a[[0, 3], 0], [0.5, 0.5], atol=1e-10)


def test_full_basis_round_trip(small_basis, small_fluct):
    c = project_coefficients(small_basis, None, small_fluct)
    rec, resid = reconstruct(small_basis, None, c, small_fluct)
    q = small_fluct.snapshot_matrix()
    assert nmse(q, rec.snapshot_matrix()) <= 1e-2
    rms = np.sqrt(np.mean(q ** 2))
    assert resid <= 1e-8 * rms


def test_zero_coefficients_give_mean(small_basis, small_data):
    fl, mean = compute_fluctuations(small_data)
    idx = all_modes(small_basis)[:4]
    c = CoefficientSeries(np.zeros((4, 6), complex), idx)
    rec, _ = reconstruct(small_basis, idx, c, fl.subset(0, 6), mean)
    fluid = small_data.geometry.fluid
    np.testing.assert_array_equal(rec.velocity[:, fluid], np.broadcast_to(
        mean.mean_velocity[fluid], (6, fluid.sum(), 2)))


def test_one_mode_is_rank_one(small_basis, small_fluct):
    idx = [(4, 0)]
    c = project_coefficients(small_basis, idx, small_fluct)
    mat, _ = reconstruct_matrix(small_basis, idx, c.values)
    s = np.linalg.svd(mat, compute_uv=False)
    # 2 Re(phi a) spans at most the real and imaginary parts of phi
    assert s[2] < 1e-10 * s[0]


def test_idempotent(small_basis, small_fluct):
    idx = all_modes(small_basis)[::3]
    c = project_coefficients(small_basis, idx, small_fluct)
    mat, _ = reconstruct_matrix(small_basis, idx, c.values)
    c2 = project_coefficients(small_basis, idx, mat)
    np.testing.assert_allclose(c2.values, c.values, rtol=1e-8, atol=1e-8 * np.abs(c.values).max())


def test_nested_selection_does_not_increase_error(small_basis, small_fluct):
    q = small_fluct.snapshot_matrix()
    order = sorted(all_modes(small_basis), key=lambda m: -small_basis.eigenvalues[m])
    errs = []
    for n in (1, 2, 4, 8, 16, 32):
        idx = order[:n]
        gram = conjugate_gram(small_basis, idx)
        assert not gram.fallback
        c = project_coefficients(small_basis, idx, small_fluct, gram)
        errs.append(nmse(q, reconstruct_matrix(small_basis, idx, c.values)[0]))
    assert np.all(np.diff(errs) <= 1e-10)


def test_imaginary_residual_small(small_basis, small_fluct):
    idx = [m for m in all_modes(small_basis) if m[0] in (0, small_basis.n_fc - 1, 3, 4)]
    c = project_coefficients(small_basis, idx, small_fluct)
    mat, resid = reconstruct_matrix(small_basis, idx, c.values)
    assert resid <= 1e-8 * np.sqrt(np.mean(mat ** 2))


def test_nmse_cases():
    assert nmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert nmse([1.0, 2.0], [0.0, 0.0]) == 1.0
    assert nmse([1.0, 2.0], [1.0, 0.0]) == pytest.approx(4 / 5)
    assert nrmse([1.0, 2.0], [1.0, 0.0]) == pytest.approx(np.sqrt(0.8))
    np.testing.assert_allclose(nmse_series([[1.0, 0.0], [0.0, 2.0]], [[0.0, 0.0], [0.0, 1.0]]),
                               [1.0, 0.25])
    with pytest.raises(UndefinedMetricError):
        nmse([0.0], [1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.1, 10))
def test_nmse_scale_invariant(vals, scale):
    ref = np.array(vals) + 1.0
    if np.sum(ref ** 2) == 0:
        return
    app = 0.5 * ref
    assert nmse(ref * scale, app * scale) == pytest.approx(nmse(ref, app), rel=1e-9)


def test_coefficient_file(tmp_path, small_basis, small_fluct):
    c = project_coefficients(small_basis, all_modes(small_basis)[:5], small_fluct)
    p = tmp_path / "c.scof"
    write_coefficients(p, c)
    back = load_coefficients(p)
    assert back.values.tobytes() == c.values.tobytes()
    assert back.mode_index == c.mode_index and back.source_basis == c.source_basis
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CorruptFileError):
        load_coefficients(p)


def test_shape_mismatch(small_basis):
    with pytest.raises(ValueError):
        project_coefficients(small_basis, None, np.zeros((4, 3)))
