import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACTIONS, SIGMA, XI
from kamnls.lattice import ConfigurationError, SiteConfig
from kamnls.model import (
    ModelError,
    NonlinearitySpec,
    action_angle_reduce,
    block_matrix,
    build_hamiltonian,
    divisor,
    initial_normal_form,
    linear_frequencies,
    spectrum_divisor,
)
from kamnls.series import DomainParams, PhasePoint, evaluate, is_real, is_zero_momentum
from kamnls.torus import GalerkinNLS, reduced_to_physical


def test_linear_frequencies(sites):
    lam, lam_t = linear_frequencies(sites, XI, SIGMA)
    assert lam[sites.site_index((1, 0))] == pytest.approx(1.37)
    assert lam_t[sites.site_index((0, 1))] == pytest.approx(1.61)
    assert lam[sites.site_index((2, -1))] == 5 == lam_t[sites.site_index((2, -1))]
    with pytest.raises(ConfigurationError):
        linear_frequencies(sites, [0.1], SIGMA)


def test_nonlinearity_validation():
    with pytest.raises(ConfigurationError):
        NonlinearitySpec({(1, 0): 1.0})
    with pytest.raises(ConfigurationError):
        NonlinearitySpec({(-1, 3): 1.0})
    nl = NonlinearitySpec({(1, 1): 2.0, (2, 0): 0.0})
    assert nl.max_order == 2 and list(nl.coefficients) == [(1, 1)]
    assert nl.d_a(3.0, 5.0) == pytest.approx(10.0)
    assert NonlinearitySpec().is_zero


def test_built_hamiltonian_structure(desk_H):
    assert is_real(desk_H)
    assert is_zero_momentum(desk_H)
    assert set(np.unique(desk_H.normal_degree())) == {2, 4}


@pytest.mark.parametrize("g", [{(1, 1): 5e-6}, {(2, 0): 1e-3, (0, 2): -2e-3}, {(1, 2): 1e-2}])
def test_built_hamiltonian_matches_grid_energy(small_sites, g):
    """Series value equals the pseudo-spectral energy of the truncated field."""
    nl = NonlinearitySpec(g)
    H = build_hamiltonian(small_sites, nl, XI, SIGMA, 2 * nl.max_order)
    model = GalerkinNLS(small_sites, nl, XI, SIGMA)
    rng = np.random.default_rng(2)
    W = small_sites.size
    z = 0.3 * (rng.standard_normal((3, 2, W)) + 1j * rng.standard_normal((3, 2, W)))
    pt = PhasePoint(np.zeros((3, 4)), np.zeros((3, 4)),
                    np.stack([z[:, 0], z[:, 0].conj(), z[:, 1], z[:, 1].conj()], axis=1))
    np.testing.assert_allclose(evaluate(H, pt).real, model.energy(z), rtol=1e-12)


def test_reduction_is_exact_on_the_reference_torus(sites, desk_reduced):
    nf, P = desk_reduced
    nl = NonlinearitySpec({(1, 1): 5e-6})
    model = GalerkinNLS(sites, nl, XI, SIGMA)
    rng = np.random.default_rng(0)
    dp = DomainParams(0.5, 0.1, 0.5)
    NB = nf.to_series(sites)
    for frac, tol in ((0.0, 1e-16), (0.1, 1e-13)):
        x = PhasePoint.random(sites, rng, dp, size=5, real=True, frac=frac)
        x.actions = frac * 0.01 * rng.uniform(-1, 1, (5, 4)).astype(complex)
        u, v = reduced_to_physical(x, sites, ACTIONS)
        e_phys = model.energy(np.stack([u, v], axis=-2))
        e_red = nf.energy + evaluate(NB + P, x)
        assert np.abs(e_phys - e_red).max() <= tol


def test_reduction_outputs(desk_reduced):
    nf, P = desk_reduced
    np.testing.assert_allclose(nf.omega, [0.1, 1.37])
    np.testing.assert_allclose(nf.omega_t, [0.23, 1.61])
    assert is_zero_momentum(P) and is_real(P)
    assert P.degree().max() <= 4
    assert np.all(nf.a == 0) and np.all(nf.b == 0)


def test_reduction_errors(sites, desk_H):
    with pytest.raises(ModelError):
        action_angle_reduce(desk_H, sites, actions=None)  # odd tangential powers need I0 > 0
    with pytest.raises(ConfigurationError):
        action_angle_reduce(desk_H, sites, actions=[0.04, -1, 0.04, 0.04])


def test_initial_normal_form_matches_reduction(sites, desk_reduced):
    nf, _ = desk_reduced
    ref = initial_normal_form(sites, XI, SIGMA)
    np.testing.assert_array_equal(ref.frequencies, nf.frequencies)
    np.testing.assert_array_equal(np.isnan(ref.Omega), np.isnan(nf.Omega))


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.complex_numbers(max_magnitude=0.5), st.complex_numbers(max_magnitude=0.5),
       st.sampled_from(["minus", "plus"]))
def test_divisor_equals_determinant(delta, a, b, sign):
    sites = SiteConfig(2, [(0, 0), (1, 0)], [(0, 0), (0, 1)], 2)
    nf = initial_normal_form(sites, XI, SIGMA)
    i, j = sites.site_index((1, 1)), sites.site_index((2, -1))
    nf.a[i], nf.b[i], nf.a[j] = a, b, b
    for m in (None, (2, -1)):
        blk = block_matrix(nf, (1, 1), m, sign)
        det = abs(np.linalg.det(delta * np.eye(blk.dimension) + blk.matrix))
        val = float(spectrum_divisor(delta, blk.eigenvalues))
        assert val == pytest.approx(det, rel=1e-9, abs=1e-12)


def test_scalar_divisor(sites):
    nf = initial_normal_form(sites, XI, SIGMA)
    assert divisor(nf, (1, -1), (0, 0)) == pytest.approx(1.27)
