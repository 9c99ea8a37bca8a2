import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dnls_gibbs.flows import ModelParams
from dnls_gibbs.measures import (
    Ensemble,
    MeasureSpec,
    StarvationError,
    cutoff_chi,
    effective_sample_size,
    expected_acceptance,
    gauged_gibbs_weight,
    gibbs_weight,
    mc_functional_l2,
    restriction_tilt,
    sample_gamma,
    sample_gamma_coeffs,
    sample_gamma_restricted,
    sample_rho_hat,
    sample_rho_tilde,
    standard_complex_normals,
    variances,
    wick2_difference,
    wick2_exact_norm,
    wick_moment,
)
from dnls_gibbs.spectral import SpectralState

from conftest import smooth_coeffs


def wick_by_pairing(ns, ms, v):
    """Oracle: sum over all bijections written as explicit matchings, no permutation library."""
    if not ns:
        return 1.0
    total = 0.0
    n0 = ns[0]
    for j, m in enumerate(ms):
        if m == n0:
            total += v(n0) * wick_by_pairing(ns[1:], ms[:j] + ms[j + 1:], v)
    return total


def test_wick_examples():
    spec = MeasureSpec(N=4)
    v = variances(spec)
    assert wick_moment([2], [2], spec) == pytest.approx(v[6])
    assert wick_moment([2], [1], spec) == 0.0
    assert wick_moment([3, 3], [3, 3], spec) == pytest.approx(2 * v[7] ** 2)
    assert wick_moment([], [], spec) == 1.0
    with pytest.raises(ValueError):
        wick_moment([1], [1, 2], spec)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_wick_matches_pairing_oracle(ns, r):
    spec = MeasureSpec(N=3, variance_convention="physical")
    ms = list(ns)
    r.shuffle(ms)
    v = lambda n: 1.0 / (np.pi * (1 + n**4))  # noqa: E731
    assert wick_moment(ns, ms, spec) == pytest.approx(wick_by_pairing(ns, ms, v), rel=1e-13)


def test_gaussian_moments():
    spec = MeasureSpec(N=3)
    c = sample_gamma_coeffs(spec, range(100_000), seed=5)
    v = variances(spec)
    mean = c.mean(axis=0)
    se = np.sqrt(v / c.shape[0])
    assert np.all(np.abs(mean) < 4 * se * np.sqrt(2))
    a = np.abs(c) ** 2
    se2 = a.std(axis=0) / np.sqrt(c.shape[0])
    assert np.all(np.abs(a.mean(axis=0) - v) < 3 * se2)


def test_sampler_prefix_stable():
    a = standard_complex_normals(3, 17, 4)
    b = standard_complex_normals(3, 17, 9)
    np.testing.assert_array_equal(a, b[5:-5])
    s8 = sample_gamma(MeasureSpec(N=8), 2, 1)
    s4 = sample_gamma(MeasureSpec(N=4), 2, 1)
    assert s8.with_band(4).coeffs[4] == pytest.approx(s4.coeffs[4] * np.sqrt(variances(MeasureSpec(N=8))[8] / variances(MeasureSpec(N=4))[4]))
    np.testing.assert_array_equal(sample_gamma(MeasureSpec(N=8), 2, 1).coeffs, s8.coeffs)


def test_sobolev_growth_trend():
    # sum n^{2s}|f_n|^2 stabilizes for s < k - 1/2 and grows for s beyond it
    means = {}
    for N in (16, 64):
        c = sample_gamma_coeffs(MeasureSpec(N=N), range(400), seed=2)
        n = np.abs(np.arange(-N, N + 1))
        means[N] = [np.mean(np.sum(n ** (2 * s) * np.abs(c) ** 2, axis=-1)) for s in (1.0, 2.0)]
    assert means[64][0] / means[16][0] < 1.1
    assert means[64][1] / means[16][1] > 3.0


def test_restricted_sampler():
    spec = MeasureSpec(N=32, R0_restrict=0.1)
    d = sample_gamma_restricted(spec, 300, seed=0)
    assert d.coeffs.shape == (300, 65)
    assert np.all(np.sum(np.abs(d.coeffs) ** 2, axis=1) <= 0.1)
    assert d.acceptance > 0.05
    assert list(d.indices) == sorted(d.indices)
    t = restriction_tilt(spec)
    v = variances(spec)
    assert np.sum(v / (1 + t * v)) == pytest.approx(0.1)
    with pytest.raises(StarvationError):
        sample_gamma_restricted(spec, 1000, seed=0, min_acceptance=0.9)


def test_restricted_matches_plain_rejection():
    # exactness of the tilted rejection: compare E[mu] with naive rejection at a mild restriction
    spec = MeasureSpec(N=4, R0_restrict=1.3)
    draw = sample_gamma_restricted(spec, 4000, seed=1)
    tilted = draw.coeffs
    plain = sample_gamma_coeffs(spec, range(20000), seed=9)
    inside = np.sum(np.abs(plain) ** 2, axis=1) <= 1.3
    assert draw.acceptance == pytest.approx(expected_acceptance(spec, inside.mean()), rel=0.05)
    plain = plain[inside]
    mt = np.sum(np.abs(tilted) ** 2, axis=1)
    mp = np.sum(np.abs(plain) ** 2, axis=1)
    se = np.sqrt(mt.var() / mt.size + mp.var() / mp.size)
    assert abs(mt.mean() - mp.mean()) < 4 * se


def test_cutoff():
    assert cutoff_chi(0.3 * 2.0, 2.0) == 1.0
    assert cutoff_chi(1.2 * 2.0, 2.0) == 0.0
    assert 0.0 < cutoff_chi(0.75, 1.0) < 1.0
    x = np.linspace(0, 1.3, 2001)
    y = cutoff_chi(x, 1.0)
    assert np.all(np.diff(y) <= 1e-15)
    for x0 in (0.5, 1.0):  # smooth at the junctions: one-sided slopes vanish
        for h in (1e-2, 5e-3):
            assert abs(cutoff_chi(x0 + h, 1.0) - cutoff_chi(x0 - h, 1.0)) / (2 * h) < 1e-6


def test_weights(rng):
    spec = MeasureSpec(N=6)
    assert gibbs_weight(SpectralState.zeros(6), spec, 1.0) == 1.0
    big = SpectralState.from_modes({0: 2.0}, 6)
    assert gibbs_weight(big, spec, 1.0) == 0.0
    f = SpectralState(6, smooth_coeffs(rng, 6, 0.05))
    assert gauged_gibbs_weight(f, spec, 0.0, 1.0) == pytest.approx(gibbs_weight(f, spec, 1.0))
    huge = MeasureSpec(N=6, radii=(1e6, 1e6))
    assert gibbs_weight(f, huge, 0.0) == 1.0
    with pytest.raises(ValueError):
        gibbs_weight(f, MeasureSpec(k=3, N=6, radii=(1, 1, 1)), 1.0)


def test_mc_l2():
    spec = MeasureSpec(N=4)
    est, se = mc_functional_l2(lambda c: np.full(c.shape[0], 2.0), spec, 200, 0)
    assert est == pytest.approx(2.0) and se == pytest.approx(0.0, abs=1e-12)
    v = variances(spec)
    est, se = mc_functional_l2(lambda c: c[:, 5], spec, 20000, 1)
    assert abs(est - np.sqrt(v[5])) < 3 * se
    with pytest.raises(ValueError):
        mc_functional_l2(lambda c: c[:, 0], spec, 50, 0)


def test_wick2_exact_norm_by_enumeration():
    # independent route: E|sum_n c_n |f_n|^2|^2 from fourth moments via wick_moment
    spec = MeasureSpec(N=8)
    N = 2
    n = [m for m in range(-2 * N, 2 * N + 1) if abs(m) > N]
    c = {m: -2 * np.pi * (1j * m) * np.conj((1j * m) ** 2) for m in n}
    total = 0.0
    for a, b in itertools.product(n, n):
        total += (c[a] * np.conj(c[b])).real * wick_moment([a, b], [a, b], spec)
    assert np.sqrt(total) == pytest.approx(wick2_exact_norm(spec, N), rel=1e-12)
    draws = sample_gamma_coeffs(MeasureSpec(N=2 * N), range(40000), 3)
    vals = wick2_difference(draws, N)
    est = np.sqrt(np.mean(np.abs(vals) ** 2))
    se = np.std(np.abs(vals) ** 2) / np.sqrt(vals.size) / (2 * est)
    assert abs(est - wick2_exact_norm(spec, N)) < 4 * se


def test_ensembles():
    spec = MeasureSpec(N=16, variance_convention="physical")
    p = ModelParams.paper(1.0, 2, 16)
    ens = sample_rho_tilde(spec, p.alpha, p.beta, 200, seed=4)
    assert 0.3 * 200 < ens.effective_size() <= 200
    text = ens.to_jsonl()
    back = Ensemble.from_jsonl(text, 4, spec)
    np.testing.assert_array_equal(back.coeffs, ens.coeffs)
    np.testing.assert_array_equal(back.weights, ens.weights)
    assert json.loads(text.splitlines()[0])["index"] == ens.indices[0]
    e0 = np.sum(np.abs(ens.coeffs) ** 2, axis=1) * np.pi
    w = ens.weights
    assert ens.weighted_mean(e0) == pytest.approx(np.sum(w * e0) / np.sum(w))
    hat = sample_rho_hat(spec, p.alpha, p.beta, 200, seed=4)
    np.testing.assert_array_equal(hat.weights, ens.weights)
    assert effective_sample_size([1, 1, 1, 1]) == 4.0
    assert effective_sample_size([0, 0]) == 0.0
    with pytest.raises(ValueError):
        Ensemble([(SpectralState.zeros(1), -1.0)], 0, spec)


def test_ess_at_default_radii():
    ens = sample_rho_tilde(MeasureSpec(N=32), -5 / 6, 1.0, 400, seed=0)
    assert ens.effective_size() > 0.3 * 400


def test_spec_validation():
    with pytest.raises(ValueError):
        MeasureSpec(variance_convention="lebesgue")
    with pytest.raises(ValueError):
        MeasureSpec(radii=(1.0,))
    with pytest.raises(ValueError):
        MeasureSpec(R0_restrict=0.0)
