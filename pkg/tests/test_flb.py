import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lafem import flb
from lafem.cli import square_boundary_eigenvalues
from lafem.mesh import uniform_mesh

GAMMAS = [-0.75, 0.0, 0.5, 0.75, 1.0]


def test_eigenvalues_match_square_boundary(basis16):
    k = np.arange(1, 17)
    rel = np.abs(basis16.eigenvalues[:16] - square_boundary_eigenvalues(k)) \
        / square_boundary_eigenvalues(k)
    assert rel.max() <= 1e-2
    assert np.all(np.diff(basis16.eigenvalues) >= -1e-12)


def test_eigenvectors_mass_orthonormal(basis16):
    Psi = basis16.eigenvectors
    G = Psi.T @ basis16.mass.matvec(Psi.T).T
    assert np.abs(G - np.eye(basis16.K0)).max() <= 1e-8


@pytest.mark.parametrize("gamma", GAMMAS)
def test_eigen_action_on_fine_vectors(basis16, gamma):
    for k in (0, 5, 17, 31):
        psi = basis16.eigenvectors[:, k]
        lam = basis16.eigenvalues[k]
        np.testing.assert_allclose(basis16.apply(psi, gamma, fine=True), lam ** gamma * psi,
                                   atol=1e-8 * max(1, lam ** gamma))
        np.testing.assert_allclose(basis16.apply(psi, gamma), lam ** gamma * basis16.restrict(psi),
                                   atol=1e-8 * max(1, lam ** gamma))


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 2 ** 31 - 1))
def test_semigroup_on_span(basis16, a, b, seed):
    coef = np.random.default_rng(seed).standard_normal(basis16.K0)
    u = basis16.synthesize(coef, fine=True)
    lhs = basis16.apply(basis16.apply(u, a, fine=True), b, fine=True)
    rhs = basis16.apply(u, a + b, fine=True)
    scale = np.abs(rhs).max()
    assert np.abs(lhs - rhs).max() <= 1e-8 * max(scale, 1.0)


def test_gamma_zero_is_projection(basis16, rng):
    u = rng.standard_normal(basis16.n_fine)
    p = basis16.apply(u, 0.0, fine=True)
    np.testing.assert_allclose(basis16.apply(p, 0.0, fine=True), p, atol=1e-12)


def test_constant_is_annihilated(basis16):
    # roundoff in the projection is amplified by lambda_max^gamma
    scale = basis16.eigenvalues[-1] ** 0.5
    np.testing.assert_allclose(basis16.apply(np.ones(basis16.n_coarse), 0.5), 0,
                               atol=1e-13 * scale * basis16.n_coarse)


def test_gamma_derivative_matches_finite_differences(basis16, rng):
    u = rng.standard_normal(basis16.n_coarse)
    h = 1e-6
    for g in (0.0, 0.4, 0.9):
        fd = (basis16.apply(u, g + h) - basis16.apply(u, g - h)) / (2 * h)
        np.testing.assert_allclose(basis16.gamma_derivative(u, g), fd, rtol=1e-6, atol=1e-8)


def test_per_row_gamma(basis16, rng):
    U = rng.standard_normal((3, basis16.n_coarse))
    g = np.array([0.1, 0.5, -0.3])
    out = basis16.apply(U, g)
    for i in range(3):
        np.testing.assert_allclose(out[i], basis16.apply(U[i], g[i]), atol=1e-14)


def test_seminorm_and_spectrum(basis16):
    k = 7
    psi = basis16.eigenvectors[:, k]
    assert basis16.seminorm(psi, 0.75) == pytest.approx(basis16.eigenvalues[k] ** 0.75)
    E = basis16.spectrum(psi)
    assert E[k] == pytest.approx(1.0) and np.delete(E, k).max() < 1e-20


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(16, 31))
def test_high_frequency_share_increases(basis16, seed, high):
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal(basis16.K0)
    coef[high] = coef[high] if abs(coef[high]) > 1e-3 else 1.0
    u = basis16.synthesize(coef, fine=True)
    before = flb.high_frequency_share(basis16.spectrum(u))
    after = flb.high_frequency_share(basis16.spectrum(basis16.apply(u, 0.75, fine=True)))
    assert after > before


def test_smoothing_reduces_high_frequency_share(basis16, rng):
    u = rng.standard_normal(basis16.n_coarse)
    before = flb.high_frequency_share(basis16.spectrum(u))
    after = flb.high_frequency_share(basis16.spectrum(flb.smooth_field(basis16, u)))
    assert after < before


def test_input_length_validation(basis16):
    with pytest.raises(ValueError):
        basis16.apply(np.ones(basis16.n_coarse + 1), 0.5)


def test_build_rejects_bad_K0_and_open_curve(space16):
    with pytest.raises(ValueError):
        flb.build_spectral_basis(space16.trace, K0=10_000)
    with pytest.raises(ValueError):
        flb.build_spectral_basis(uniform_mesh(1, 8))


def test_save_load_roundtrip(basis16, tmp_path, rng):
    basis16.save(tmp_path / "b.json")
    b = flb.SpectralBasis.load(tmp_path / "b.json")
    u = rng.standard_normal(basis16.n_coarse)
    np.testing.assert_array_equal(b.eigenvalues, basis16.eigenvalues)
    np.testing.assert_allclose(b.apply(u, 0.75), basis16.apply(u, 0.75), atol=1e-14)


def test_linear_prolongation_exact_for_affine_arclength_data(basis16):
    # on each coarse segment, the refined nodes are midpoints: prolongation averages neighbours
    P = basis16.prolongation.toarray()
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_array_equal(P[:basis16.n_coarse], np.eye(basis16.n_coarse))
