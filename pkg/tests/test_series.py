import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_series
from kamnls.lattice import SiteConfig
from kamnls.series import (
    DomainParams,
    HamiltonianSeries,
    PhasePoint,
    SiteMismatchError,
    add,
    conjugate,
    dumps,
    evaluate,
    gradient,
    hamiltonian_vector_field,
    is_real,
    is_zero_momentum,
    loads,
    majorant_norm,
    multiply,
    partial,
    poisson_bracket,
    prune_budget,
    truncate,
    vector_field_norm,
    vector_field_norm_by_parts,
)

SITES = SiteConfig(2, [(0, 0), (1, 0)], [(0, 0), (0, 1)], 2)
DP = DomainParams(0.5, 0.1, 0.5)
seeds = st.integers(0, 2**32 - 1)


def point(rng, size=None, real=False):
    return PhasePoint.random(SITES, rng, DP, size=size, real=real)


def pointwise_bracket(G, H, x):
    """{G, H} from first derivatives at x."""
    g, h = gradient(G, x), gradient(H, x)
    val = (g.angles * h.actions - g.actions * h.angles).sum(axis=-1)
    val = val + 1j * (g.modes[..., 0, :] * h.modes[..., 1, :] - g.modes[..., 1, :] * h.modes[..., 0, :]).sum(axis=-1)
    val = val + 1j * (g.modes[..., 2, :] * h.modes[..., 3, :] - g.modes[..., 3, :] * h.modes[..., 2, :]).sum(axis=-1)
    return val


def test_canonical_merge_and_cancel():
    a = HamiltonianSeries.monomial(SITES, 2.0, k=(1, 0), u=[(1, 1)])
    b = HamiltonianSeries.monomial(SITES, -2.0, k=(1, 0), u=[(1, 1)])
    assert len(a + a) == 1 and (a + a).coef[0] == 4.0
    assert len(a + b) == 0
    # factor order does not matter
    c = HamiltonianSeries.monomial(SITES, 1.0, u=[(1, 1), (0, 1)])
    d = HamiltonianSeries.monomial(SITES, 1.0, u=[(0, 1), (1, 1)])
    assert c.equals(d)


def test_multiply_evaluates_pointwise():
    rng = np.random.default_rng(1)
    A, B = random_series(SITES, rng), random_series(SITES, rng)
    x = point(rng, size=5)
    np.testing.assert_allclose(evaluate(multiply(A, B), x), evaluate(A, x) * evaluate(B, x), rtol=1e-12)


def test_truncate_and_degree():
    A = HamiltonianSeries.monomial(SITES, 1.0, k=(3, 0), l=(1, 0), u=[(1, 1)])
    assert A.degree()[0] == 3 and A.k_order()[0] == 3
    assert len(truncate(A, 2, 10)) == 0 and len(truncate(A, 3, 3)) == 1
    with pytest.raises(ValueError):
        truncate(A, -1, 3)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_bracket_matches_pointwise_formula(seed):
    rng = np.random.default_rng(seed)
    G, H = random_series(SITES, rng), random_series(SITES, rng)
    x = point(rng, size=4)
    lhs = evaluate(poisson_bracket(G, H), x)
    rhs = pointwise_bracket(G, H, x)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-14 * np.abs(rhs).max())


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_bracket_antisymmetry_and_leibniz(seed):
    rng = np.random.default_rng(seed)
    F, G, H = (random_series(SITES, rng, n_terms=4) for _ in range(3))
    assert add(poisson_bracket(G, H), poisson_bracket(H, G)).max_abs() <= 1e-12 * max(
        poisson_bracket(G, H).max_abs(), 1.0)
    x = point(rng, size=3)
    lhs = evaluate(poisson_bracket(multiply(F, G), H), x)
    rhs = evaluate(multiply(F, poisson_bracket(G, H)) + multiply(G, poisson_bracket(F, H)), x)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-14 * np.abs(rhs).max())


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_jacobi_identity(seed):
    rng = np.random.default_rng(seed)
    F, G, H = (random_series(SITES, rng, n_terms=3) for _ in range(3))
    pb = poisson_bracket
    J = pb(F, pb(G, H)) + pb(G, pb(H, F)) + pb(H, pb(F, G))
    scale = max(pb(F, pb(G, H)).max_abs(), 1.0)
    assert J.max_abs() <= 1e-11 * scale


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_zero_momentum_closed_under_bracket(seed):
    rng = np.random.default_rng(seed)
    G = random_series(SITES, rng, zero_momentum=True)
    H = random_series(SITES, rng, zero_momentum=True)
    assert is_zero_momentum(G) and is_zero_momentum(H)
    assert is_zero_momentum(poisson_bracket(G, H))


def test_momentum_detects_violation():
    assert not is_zero_momentum(HamiltonianSeries.monomial(SITES, 1.0, u=[(0, 1)]))
    assert is_zero_momentum(HamiltonianSeries.monomial(SITES, 1.0, u=[(0, 1)], ubar=[(0, 1)]))


def test_vector_field_norm_matches_derivative_oracle():
    rng = np.random.default_rng(3)
    A = random_series(SITES, rng, n_terms=12)
    assert vector_field_norm(A, DP) == pytest.approx(vector_field_norm_by_parts(A, DP), rel=1e-12)
    assert majorant_norm(A, DP) > 0


def test_prune_budget_respects_budget():
    rng = np.random.default_rng(4)
    A = random_series(SITES, rng, n_terms=20)
    budget = 0.3 * vector_field_norm(A, DP)
    B = prune_budget(A, DP, budget)
    assert len(B) < len(A)
    assert vector_field_norm(A - B, DP) <= budget * (1 + 1e-12)


def test_serialization_round_trip():
    rng = np.random.default_rng(5)
    A = random_series(SITES, rng, n_terms=10)
    B = loads(dumps(A))
    assert A.equals(B)
    assert dumps(B) == dumps(A)
    other = SiteConfig(2, [(0, 0), (1, 0)], [(0, 0), (0, 1)], 3)
    with pytest.raises(SiteMismatchError):
        loads(dumps(A), other)


def test_reality():
    rng = np.random.default_rng(6)
    A = random_series(SITES, rng)
    R = A + conjugate(A)
    assert is_real(R) and not is_real(A)
    x = point(rng, size=3, real=True)
    assert np.abs(evaluate(R, x).imag).max() < 1e-14


@pytest.mark.parametrize("kind", ["theta", "phi", "I", "J", "u", "ubar", "v", "vbar"])
def test_partial_matches_gradient(kind):
    rng = np.random.default_rng(7)
    A = random_series(SITES, rng, n_terms=10)
    x = point(rng)
    g = gradient(A, x)
    if kind in ("theta", "phi", "I", "J"):
        j = 1
        col = j if kind in ("theta", "I") else SITES.b + j
        val = evaluate(partial(A, kind, j), x)
        ref = (g.angles if kind in ("theta", "phi") else g.actions)[col]
    else:
        n = (1, 1)
        val = evaluate(partial(A, kind, n), x)
        ref = g.modes[["u", "ubar", "v", "vbar"].index(kind), SITES.site_index(n)]
    assert val == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_vector_field_is_lie_derivative():
    rng = np.random.default_rng(8)
    G, H = random_series(SITES, rng), random_series(SITES, rng)
    x = point(rng)
    X = hamiltonian_vector_field(H, x)
    g = gradient(G, x)
    dG = (g.angles * X.angles).sum() + (g.actions * X.actions).sum() + (g.modes * X.modes).sum()
    assert dG == pytest.approx(evaluate(poisson_bracket(G, H), x), rel=1e-10)
