"""Tests for the orthogonal-decomposition module (kl).

Expected values below are hand-derived from the definitions: population
(1/M) covariance, eigenpairs sorted by non-increasing eigenvalue, modes
sign-fixed so their largest-magnitude entry is positive.
"""

import numpy as np
import pytest

from klpcgp import kl
from klpcgp.errors import DegenerateDataError


def whitened(rng, m, d):
    """Samples whose population covariance is exactly the identity."""
    x = rng.standard_normal((m, d))
    x -= x.mean(axis=0)
    cov = x.T @ x / m
    chol = np.linalg.cholesky(cov)
    return x @ np.linalg.inv(chol).T


def with_spectrum(rng, m, eigenvalues):
    """Samples whose population covariance has the given spectrum exactly."""
    d = len(eigenvalues)
    x = whitened(rng, m, d) * np.sqrt(eigenvalues)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return x @ q.T


def test_two_point_dataset():
    # {(0,0), (2,0)}: mean (1,0), K = [[1,0],[0,0]], eigenpairs by hand
    basis = kl.decompose(np.array([[0.0, 0.0], [2.0, 0.0]]), n_modes=2)
    np.testing.assert_allclose(basis.mean, [1.0, 0.0])
    np.testing.assert_allclose(basis.eigenvalues, [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(basis.modes[:, 0], [1.0, 0.0], atol=1e-15)


def test_sign_tie_breaks_to_lowest_index():
    # {(0,0),(1,-1),(-1,1)}: K = [[2/3,-2/3],[-2/3,2/3]], lambda = (4/3, 0),
    # leading mode (1,-1)/sqrt(2); entries tie in magnitude so index 0 wins.
    pts = np.array([[0.0, 0.0], [1.0, -1.0], [-1.0, 1.0]])
    basis = kl.decompose(pts, n_modes=2)
    np.testing.assert_allclose(basis.eigenvalues[0], 4.0 / 3.0, rtol=1e-14)
    s = 1.0 / np.sqrt(2.0)
    np.testing.assert_allclose(basis.modes[:, 0], [s, -s], rtol=1e-14)


def test_identity_covariance_gives_unit_eigenvalues():
    x = whitened(np.random.default_rng(7), 40, 3)
    basis = kl.decompose(x, n_modes=3)
    np.testing.assert_allclose(basis.eigenvalues, np.ones(3), atol=1e-10)


def test_known_spectrum_and_energy_truncation():
    rng = np.random.default_rng(11)
    x = with_spectrum(rng, 200, [10.0, 3.0, 0.5, 0.1])
    # cumulative energy: 0.7353, 0.9559, 0.9926, 1.0
    assert kl.decompose(x, energy=0.99).n_keep == 3
    assert kl.decompose(x, energy=0.95).n_keep == 2
    assert kl.decompose(x, energy=0.70).n_keep == 1
    assert kl.decompose(x, energy=1.0).n_keep == 4
    basis = kl.decompose(x, n_modes=4)
    np.testing.assert_allclose(basis.eigenvalues, [10.0, 3.0, 0.5, 0.1],
                               rtol=1e-10, atol=1e-10)


def test_roundtrip_is_exact_at_full_rank():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 5)) * [3.0, 1.0, 0.4, 0.2, 0.05]
    basis = kl.decompose(x, n_modes=5)
    rebuilt = kl.reconstruct(basis, kl.project(basis, x))
    assert np.max(np.abs(rebuilt - x)) < 1e-12


def test_projected_covariance_is_diagonal():
    rng = np.random.default_rng(19)
    x = with_spectrum(rng, 300, [5.0, 2.0, 0.3, 0.05])
    basis = kl.decompose(x, n_modes=4)
    xi = kl.project(basis, x)
    cov = xi.T @ xi / len(xi)  # projections are exactly centered
    np.testing.assert_allclose(np.diag(cov), basis.eigenvalues, rtol=1e-10)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 1e-8 * basis.eigenvalues[0]
    assert np.max(np.abs(xi.mean(axis=0))) < 1e-12


def test_modes_are_orthonormal_and_signed():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((120, 6)) * np.linspace(2.0, 0.1, 6)
    basis = kl.decompose(x, energy=0.99)
    gram = basis.modes.T @ basis.modes
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-12)
    assert np.all(np.diff(basis.eigenvalues) <= 1e-15)
    assert np.all(basis.eigenvalues >= 0.0)
    for n in range(6):
        col = basis.modes[:, n]
        assert col[np.argmax(np.abs(col))] > 0.0


def test_single_vector_projection_shape():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 4))
    basis = kl.decompose(x, n_modes=2)
    xi = kl.project(basis, x[0])
    assert xi.shape == (2,)
    assert kl.reconstruct(basis, xi).shape == (4,)


def test_truncate_reuses_spectrum():
    rng = np.random.default_rng(13)
    x = with_spectrum(rng, 200, [10.0, 3.0, 0.5, 0.1])
    basis = kl.decompose(x, n_modes=4)
    assert kl.truncate(basis, energy=0.95).n_keep == 2
    cut = kl.truncate(basis, n_modes=1)
    assert cut.n_keep == 1
    np.testing.assert_array_equal(cut.eigenvalues, basis.eigenvalues)


def test_deterministic_output():
    rng = np.random.default_rng(29)
    x = rng.standard_normal((80, 3))
    a = kl.decompose(x, energy=0.99)
    b = kl.decompose(x, energy=0.99)
    np.testing.assert_array_equal(a.modes, b.modes)
    np.testing.assert_array_equal(a.eigenvalues, b.eigenvalues)


def test_degenerate_inputs_raise():
    with pytest.raises(DegenerateDataError):
        kl.decompose(np.ones((1, 3)))
    bad = np.ones((10, 2))
    bad[3, 1] = np.nan
    with pytest.raises(DegenerateDataError):
        kl.decompose(bad)
    x = np.random.default_rng(0).standard_normal((20, 3))
    with pytest.raises(ValueError):
        kl.decompose(x, n_modes=0)
    with pytest.raises(ValueError):
        kl.decompose(x, n_modes=4)
    with pytest.raises(ValueError):
        kl.decompose(x, energy=0.0)
    with pytest.raises(ValueError):
        kl.decompose(x, energy=1.5)


def test_dimension_mismatch_raises():
    basis = kl.decompose(np.random.default_rng(1).standard_normal((20, 3)),
                         n_modes=2)
    with pytest.raises(ValueError):
        kl.project(basis, np.zeros(4))
    with pytest.raises(ValueError):
        kl.reconstruct(basis, np.zeros(3))
