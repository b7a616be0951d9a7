import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lafem import eit, flb
from lafem.eit import (CauchyData, InclusionSet, add_noise, characteristic_image, compute_xi,
                       conductivity_from_inclusions, forward_eit, generate_dataset, load_sample,
                       pixel_centers, sample_inclusions, standard_currents)
from lafem.fem import DtNMap, boundary_weights
from lafem.mesh import uniform_refine

L4 = (1, 2, 4, 8)


def constant_field(space, c):
    return eit.ConductivityField(space.mesh, np.full(space.mesh.number_of_cells, float(c)), c, c)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 5))
def test_sampler_bounds(seed, N_c):
    incl = sample_inclusions(N_c, seed)
    assert len(incl) == N_c
    assert np.all(np.abs(incl.centers) < 0.8)
    assert np.all(incl.radii >= 0.1)
    assert np.all(np.abs(incl.centers) + incl.radii[:, None] <= 0.9 + 1e-15)


def test_sampler_deterministic():
    a, b = sample_inclusions(3, 11), sample_inclusions(3, 11)
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.radii, b.radii)
    with pytest.raises(ValueError):
        sample_inclusions(0)


def test_inclusion_validation_and_membership():
    with pytest.raises(ValueError):
        InclusionSet([[0, 0]], [-0.1])
    with pytest.raises(ValueError):
        InclusionSet([[0, 0], [1, 1]], [0.1])
    s = InclusionSet([[0, 0]], [0.5])
    np.testing.assert_array_equal(s.contains(np.array([[0.5, 0], [0.51, 0]])), [True, False])
    assert not InclusionSet().contains(np.zeros((1, 2))).any()


def test_conductivity_centroid_rule(space16):
    incl = InclusionSet([[0.1, -0.2]], [0.4])
    f = conductivity_from_inclusions(space16.mesh, incl)
    inside = incl.contains(space16.mesh.centroids())
    np.testing.assert_array_equal(f.values, np.where(inside, 10.0, 1.0))
    fine = uniform_refine(space16.mesh, 1)
    np.testing.assert_array_equal(f.on(fine), np.where(incl.contains(fine.centroids()), 10., 1.))
    g = eit.ConductivityField(space16.mesh, f.values)
    # without inclusions, fine cells inherit their parent value, so the integral is preserved
    assert g.on(fine) @ fine.cell_measures() == pytest.approx(
        f.values @ space16.mesh.cell_measures(), rel=1e-13)
    with pytest.raises(ValueError):
        conductivity_from_inclusions(space16.mesh, incl, sigma1=0)


def test_currents_are_mean_zero(space16):
    ch = standard_currents(space16)
    w = boundary_weights(space16)[space16.boundary_dofs]
    assert np.abs(ch.values @ w).max() <= 1e-10
    assert ch.labels == eit.DEFAULT_CHANNELS


def test_background_xi_vanishes_without_refinement(space16):
    # data and DtN on the same mesh: Lambda_1 g_D reproduces g_N up to roundoff
    data = forward_eit(space16, constant_field(space16, 1.0), L4, refine=0, method="cholesky")
    xi = compute_xi(data)
    assert np.abs(xi.values).max() <= 1e-10 * np.abs(data.g_N).max()


@pytest.mark.parametrize("c", [0.1, 3.0, 100.0])
def test_dirichlet_data_scale_inversely_with_conductivity(space16, c):
    ref = forward_eit(space16, constant_field(space16, 1.0), L4, refine=1, method="cholesky")
    dat = forward_eit(space16, constant_field(space16, c), L4, refine=1, method="cholesky")
    np.testing.assert_allclose(dat.g_D, ref.g_D / c, atol=1e-12 * np.abs(ref.g_D).max() / c)
    np.testing.assert_array_equal(dat.g_N, ref.g_N)


def test_batched_fields_equal_loop(space16):
    fields = [conductivity_from_inclusions(space16.mesh, sample_inclusions(2, s)) for s in range(3)]
    batched = forward_eit(space16, fields, L4, method="cholesky")
    for f, d in zip(fields, batched):
        single = forward_eit(space16, f, L4, method="cholesky")
        np.testing.assert_allclose(d.g_D, single.g_D, rtol=0, atol=1e-13)


def test_cg_and_cholesky_data_agree(space16):
    f = conductivity_from_inclusions(space16.mesh, sample_inclusions(3, 5))
    a = forward_eit(space16, f, L4, method="cholesky")
    b = forward_eit(space16, f, L4, method="cg", tol=1e-11)
    np.testing.assert_allclose(a.g_D, b.g_D, atol=1e-8 * np.abs(a.g_D).max())


@pytest.fixture(scope="module")
def data32(space32):
    f = conductivity_from_inclusions(space32.mesh, InclusionSet([[0.2, 0.1]], [0.3]))
    return forward_eit(space32, f, eit.DEFAULT_CHANNELS)


def test_zero_noise_is_identity(data32):
    d = add_noise(data32, 0.0, "gaussian", seed=1)
    np.testing.assert_array_equal(d.g_D, data32.g_D)
    assert d.noise["delta"] == 0.0


def test_gaussian_noise_relative_level(data32):
    delta = 0.1
    d = add_noise(data32, delta, "gaussian", seed=2)
    rel = np.linalg.norm(d.g_D - data32.g_D) / np.linalg.norm(data32.g_D)
    assert rel == pytest.approx(delta, rel=0.2)
    np.testing.assert_array_equal(add_noise(data32, delta, "gaussian", seed=2).g_D, d.g_D)


def test_lowfreq_noise_is_smoother(data32, basis32):
    a = add_noise(data32, 0.1, "gaussian", seed=3).g_D - data32.g_D
    b = add_noise(data32, 0.1, "lowfreq", seed=3, basis=basis32).g_D - data32.g_D
    sa = flb.high_frequency_share(basis32.spectrum(a).sum(axis=0))
    sb = flb.high_frequency_share(basis32.spectrum(b).sum(axis=0))
    assert sb < sa


def test_noise_validation(data32):
    with pytest.raises(ValueError):
        add_noise(data32, -1.0)
    with pytest.raises(ValueError):
        add_noise(data32, 0.1, "uniform")
    with pytest.raises(ValueError):
        add_noise(data32, 0.1, "lowfreq", basis=None)


def test_xi_is_linear_in_cauchy_data(data32, space32, rng):
    dtn = DtNMap(space32)
    a, b = 1.5, -0.25
    other = CauchyData(space32, data32.labels, rng.standard_normal(data32.g_N.shape),
                       rng.standard_normal(data32.g_D.shape))
    comb = CauchyData(space32, data32.labels, a * data32.g_N + b * other.g_N,
                      a * data32.g_D + b * other.g_D)
    lhs = compute_xi(comb, dtn).values
    rhs = a * compute_xi(data32, dtn).values + b * compute_xi(other, dtn).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())


def test_xi_grows_with_contrast(space16):
    incl = InclusionSet([[0.0, 0.2]], [0.4])
    norms = []
    for s1 in (1.5, 3.0, 10.0):
        f = conductivity_from_inclusions(space16.mesh, incl, sigma1=s1)
        norms.append(np.linalg.norm(compute_xi(forward_eit(space16, f, L4)).values))
    assert norms[0] < norms[1] < norms[2]


def test_characteristic_image_area_and_orientation():
    img = characteristic_image(InclusionSet([[0, 0]], [0.5]), 64)
    assert img.sum() * (2 / 64) ** 2 == pytest.approx(np.pi * 0.25, rel=0.02)
    img = characteristic_image(InclusionSet([[0.5, -0.5]], [0.2]), 64)
    rows, cols = np.nonzero(img)
    assert rows.mean() < 32 < cols.mean()
    np.testing.assert_allclose(pixel_centers(4)[:2], [[-0.75, -0.75], [-0.25, -0.75]])


def test_dataset_is_deterministic(tmp_path):
    kw = dict(n_samples=2, seed=7, n=8, N_c=2, l_list=(1, 2), delta=0.05, kind="gaussian",
              image_n=16)
    m1 = generate_dataset(tmp_path / "a", **kw)
    m2 = generate_dataset(tmp_path / "b", **kw)
    assert m1 == m2
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    s = load_sample(tmp_path / "a", 1)
    assert s["xi"].shape == (2, 32) and s["truth"].shape == (16, 16)
    assert s["sigma"].shape == (128,)
