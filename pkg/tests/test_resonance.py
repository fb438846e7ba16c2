import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kamnls.lattice import SiteConfig
from kamnls.model import block_matrix, initial_normal_form
from kamnls.resonance import (
    CLASSES,
    ResonanceQuery,
    _point_minima,
    analytic_slice_builder,
    block_spectra,
    is_resonant,
    l1_annulus,
    measure_excluded,
    report_text,
    sample_points,
)

SMALL = SiteConfig(2, [(0, 0), (1, 0)], [(0, 0), (0, 1)], 1)


def builder(sites):
    return lambda p: initial_normal_form(sites, p[:2], p[2:])


@pytest.mark.parametrize("nb,lo,hi", [(2, 0, 3), (4, 0, 2), (3, 1, 3), (4, 2, 2 + 1)])
def test_annulus_count(nb, lo, hi):
    ks = l1_annulus(nb, lo, hi)
    brute = [k for k in itertools.product(range(-hi, hi + 1), repeat=nb) if lo < sum(map(abs, k)) <= hi]
    assert len(ks) == len(brute)
    assert len({tuple(k) for k in ks}) == len(ks)
    assert np.all(np.diff(np.abs(ks).sum(axis=1)) >= 0)


def test_query_validation():
    with pytest.raises(ValueError):
        ResonanceQuery(0.1, 1, 3, 3, None, [(0, 1)])
    with pytest.raises(ValueError):
        ResonanceQuery(0.1, 1, 0, 3, None, [(1, 0)])
    with pytest.raises(ValueError):
        ResonanceQuery(0.1, 1, 0, 3, None, [(0, 1)], sampler="sobol")


def test_sampling_is_deterministic_and_inside_the_box():
    q = ResonanceQuery(0.1, 1, 0, 3, None, [(0, 2), (-1, 1)], samples=500, seed=7)
    a, b = sample_points(q), sample_points(q)
    np.testing.assert_array_equal(a, b)
    assert a[:, 0].min() >= 0 and a[:, 0].max() <= 2 and a[:, 1].min() >= -1


def brute_minima(nf, sites, K):
    out = {c: math.inf for c in CLASSES}
    normal = [sites.site(i) for i in range(sites.size) if sites.in_Z1[i] or sites.in_Z2[i]]
    for k in l1_annulus(4, -1, K):
        d = float(k @ nf.frequencies)
        if k.any():
            out["scalar"] = min(out["scalar"], abs(d))
        for n in normal:
            M = block_matrix(nf, n).matrix
            out["block"] = min(out["block"], abs(np.linalg.det(d * np.eye(len(M)) + M)))
            for m in normal:
                for sign in ("minus", "plus"):
                    if sign == "minus" and not k.any() and sum(x * x for x in n) == sum(x * x for x in m):
                        continue
                    M = block_matrix(nf, n, m, sign).matrix
                    out[sign] = min(out[sign], abs(np.linalg.det(d * np.eye(len(M)) + M)))
    return out


@settings(max_examples=8, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_minima_match_determinant_brute_force(p):
    nf = initial_normal_form(SMALL, p[:2], p[2:])
    K = 2
    ks = l1_annulus(4, -1, K)
    spectra = block_spectra(nf, SMALL, include_zero_k=True)
    minima, _ = _point_minima(ks, ks.astype(float) @ nf.frequencies, spectra, 1e3, ~ks.any(axis=1))
    ref = brute_minima(nf, SMALL, K)
    for c in CLASSES:
        assert minima[c] == pytest.approx(ref[c], rel=1e-9, abs=1e-12)


def test_is_resonant_witness():
    # omega = (0.5, 1.0001): 2 omega_1 - omega_2 is tiny
    q = ResonanceQuery(0.05, 1.0, 0, 3, SMALL, [(0, 1)] * 4)
    res = is_resonant([0.5, 1e-4, 0.3, 0.9], q, builder(SMALL))
    assert res[:2] == ("resonant", "scalar") and res[2] in ((2, -1, 0, 0), (-2, 1, 0, 0))
    assert q.bound == pytest.approx(0.05 / 3)
    far = analytic_slice_builder()
    q1 = ResonanceQuery(0.05, 1.0, 0, 1, None, [(-1, 1), (0, 1)])
    assert is_resonant([0.01, 0.5], q1, far)[:3] == ("resonant", "scalar", (-1, 0))
    assert is_resonant([0.5, 0.5], q1, far) == ("clear",)


def test_analytic_slice_measure():
    g = 0.05
    q = ResonanceQuery(g, 12.0, 0, 1, None, [(-1, 1), (0, 1)], samples=10_000)
    rep = measure_excluded(q, analytic_slice_builder(), [g])
    se = math.sqrt(g * (1 - g) / rep.samples)
    assert abs(rep.union[0] - g) <= 3 * se
    assert rep.fractions["block"] == [0.0]


def test_measure_report_shape():
    q = ResonanceQuery(0.05, 4.0, 0, 2, SMALL, [(0, 1)] * 4, samples=200)
    rep = measure_excluded(q, builder(SMALL), [0.05, 0.025])
    assert len(rep.union) == 2 and rep.union[1] <= rep.union[0]
    for c in CLASSES:
        assert rep.fractions[c][1] <= rep.fractions[c][0] <= rep.union[0]
    text = report_text(rep)
    assert text.startswith("# resonance measure") and "union" in text
    with pytest.raises(ValueError):
        measure_excluded(ResonanceQuery(0.05, 4.0, 0, 2, SMALL, [(0, 1)] * 4, samples=50), builder(SMALL))
