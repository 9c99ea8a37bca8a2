"""Acceptance criteria 1-13, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the session (see conftest.py).
"""

import math
import time

import numpy as np
import pytest

from dnls_gibbs.cli import build_config, load_settings, main
from dnls_gibbs.experiments import fit_loglog, run, smooth_state, sobolev_state
from dnls_gibbs.flows import ModelParams, evolve_coeffs, liouville_trace
from dnls_gibbs.gauge import (
    GaugeFlowConfig,
    gauge_divergence,
    gauge_group_compose_check,
    gauge_logdet,
    gauge_truncated,
)
from dnls_gibbs.invariants import ELLS, energy, gauge_energy_identity_residual, gauged_energy
from dnls_gibbs.jacobian import real_jacobian
from dnls_gibbs.measures import (
    MeasureSpec,
    mc_functional_l2,
    sample_gamma_coeffs,
    wick2_difference,
    wick2_exact_norm,
    wick_moment,
)
from dnls_gibbs.spectral import SpectralState, mass_coeffs

RESULTS = []


def record(number, ok, detail, elapsed, budget=None):
    within = budget is None or elapsed < budget
    passed = bool(ok and within)
    timing = f"{elapsed:.1f}s" + (f" (budget {budget:g}s)" if budget else "")
    RESULTS.append((number, f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}; {timing}"))
    return passed


def default_report(command, **overrides):
    settings = load_settings(command, None)
    settings.update({k: str(v) for k, v in overrides.items()})
    return run(build_config(command, settings))


def test_01_gauge_group_law():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(100):
        N = int(rng.integers(4, 33))
        f = SpectralState(N, smooth_state(N, 1, i, rng.uniform(0.01, 1.0), rng.uniform(1.0, 4.0)))
        a1, a2 = rng.uniform(-1.0, 1.0, size=2)
        worst = max(worst, gauge_group_compose_check(f, a1, a2, oversample=8))
    ok = record(1, worst < 1e-8, f"max group-law residual {worst:.2e} < 1e-8", time.perf_counter() - t0, 30)
    assert ok


def test_02_gauge_energy_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(50):
        N = 16
        psi = SpectralState(N, smooth_state(N, 2, i, rng.uniform(0.005, 0.1), rng.uniform(1.0, 3.0)))
        alpha = rng.uniform(-1.0, 1.0)
        for ell in ELLS:
            res = gauge_energy_identity_residual(psi, ell, alpha, 1.0)
            worst = max(worst, res / (1.0 + abs(energy(psi, ell, 1.0))))
    ok = record(2, worst < 1e-6, f"max relative residual {worst:.2e} < 1e-6", time.perf_counter() - t0, 120)
    assert ok


def test_03_single_mode_closed_forms():
    t0 = time.perf_counter()
    e1 = SpectralState.from_modes({1: 1.0}, 4)
    worst = 0.0
    for beta in np.linspace(-2.0, 2.0, 9):
        expect = math.pi - 1.5 * math.pi * beta + 0.5 * math.pi * beta**2
        worst = max(worst, abs(energy(e1, 1, beta) - expect))
        for alpha in np.linspace(-2.0, 2.0, 9):
            worst = max(worst, abs(gauged_energy(e1, 1, alpha, beta) - expect))
    ok = record(3, worst < 1e-10, f"max error {worst:.2e} < 1e-10", time.perf_counter() - t0)
    assert ok


def test_04_mass_conservation():
    t0 = time.perf_counter()
    N = 128
    worst = 0.0
    pairs = [(-2.0, -2.0), (-2.0, 2.0), (2.0, -2.0), (2.0, 2.0), (-5 / 6, 1.0), (0.0, 1.0)]
    for i, (alpha, beta) in enumerate(pairs):
        c0 = smooth_state(N, 4, i, 0.1, 3.0)
        cT = evolve_coeffs(c0, ModelParams(beta=beta, alpha=alpha, N=N), 1.0)
        worst = max(worst, abs(float(mass_coeffs(cT) - mass_coeffs(c0))))
    ok = record(4, worst < 1e-9, f"max |mu(1) - mu(0)| over {len(pairs)} (alpha, beta) pairs "
                f"{worst:.2e} < 1e-9", time.perf_counter() - t0, 60)
    assert ok


def test_05_liouville_trace():
    t0 = time.perf_counter()
    p = ModelParams.paper(1.0, 2, 4)
    worst = 0.0
    for i in range(50):
        s = SpectralState(4, smooth_state(4, 5, i, 0.5, 2.0))
        tr, scale = liouville_trace(s, p, return_scale=True)
        worst = max(worst, abs(tr) / scale)
    ok = record(5, worst < 1e-6, f"max |trace| / ||J||_F {worst:.2e} < 1e-6", time.perf_counter() - t0, 60)
    assert ok


def test_06_plane_wave():
    t0 = time.perf_counter()
    worst = 0.0
    for n0, A, beta in [(1, 0.5, 1.0), (2, 0.3, -1.5), (-3, 0.8, 2.0), (0, 1.0, 1.0)]:
        N = max(abs(n0), 1) + 2
        s = SpectralState.from_modes({n0: A}, N).coeffs
        out = evolve_coeffs(s, ModelParams(beta=beta, N=N), 1.0)
        om = n0**2 - beta * n0 * A**2
        worst = max(worst, abs(out[n0 + N] - A * np.exp(-1j * om)), float(np.max(np.abs(np.delete(out, n0 + N)))))
    ok = record(6, worst < 1e-8, f"max phase error {worst:.2e} < 1e-8", time.perf_counter() - t0, 10)
    assert ok


def test_07_gauge_divergence():
    t0 = time.perf_counter()
    Ns = [16 * 2**j for j in range(7)]
    f = SpectralState(Ns[-1], sobolev_state(Ns[-1], 7, 1, 0.3, 2.0))
    divs = [abs(gauge_divergence(f.with_band(N), N)) for N in Ns]
    slope = fit_loglog(Ns, divs)["slope"]
    single = gauge_divergence(SpectralState.from_modes({1: 1.0}, 2), 2)
    ok = slope <= -0.40 and abs(single + 5.0 / 3.0) < 1e-14
    ok = record(7, ok, f"slope {slope:.3f} <= -0.40, single mode {single:.15f} = -5/3",
                time.perf_counter() - t0, 30)
    assert ok


def test_08_jacobian_determinant():
    t0 = time.perf_counter()
    worst = 0.0
    for i, N in enumerate((2, 3, 4)):
        cfg = GaugeFlowConfig(alpha=0.6, N=N, ode_tol=1e-12)
        c = smooth_state(N, 8, i, 0.5, 2.0)

        def fmap(batch):
            return np.array([gauge_truncated(SpectralState(N, row), cfg).coeffs for row in batch])

        ref = np.linalg.slogdet(real_jacobian(fmap, c, 1e-6))[1]
        worst = max(worst, abs(math.exp(gauge_logdet(SpectralState(N, c), cfg) - ref) - 1.0))
    Ns = [4, 8, 16, 32, 64]
    f = SpectralState(4 * Ns[-1], sobolev_state(4 * Ns[-1], 8, 0, 0.3, 2.0))
    dev = [abs(math.exp(gauge_logdet(f.with_band(N), GaugeFlowConfig(alpha=0.6, N=N))) - 1.0) for N in Ns]
    mono = all(b < a for a, b in zip(dev, dev[1:]))
    ok = record(8, worst < 1e-4 and mono,
                f"FD determinant rel error {worst:.2e} < 1e-4; |det - 1| over N={Ns}: "
                + ", ".join(f"{d:.2e}" for d in dev) + (" decreasing" if mono else " NOT decreasing"),
                time.perf_counter() - t0, 120)
    assert ok


def test_09_wick_oracle():
    t0 = time.perf_counter()
    spec = MeasureSpec(N=3)
    draws = sample_gamma_coeffs(spec, range(100_000), seed=9)
    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(20):
        ell = int(rng.integers(1, 4))
        ns = [int(x) for x in rng.integers(-3, 4, size=ell)]
        ms = list(rng.permutation(ns)) if rng.uniform() < 0.75 else [int(x) for x in rng.integers(-3, 4, size=ell)]
        X = np.ones(draws.shape[0], dtype=complex)
        for n, m in zip(ns, ms):
            X *= draws[:, n + 3] * np.conj(draws[:, m + 3])
        se = math.sqrt(float(np.mean(np.abs(X - X.mean()) ** 2)) / X.size)
        exact = wick_moment(ns, [int(m) for m in ms], spec)
        worst = max(worst, abs(X.mean() - exact) / se)
    ok = record(9, worst < 4.0, f"max |MC - Wick| = {worst:.2f} SE < 4 over 20 monomials",
                time.perf_counter() - t0, 120)
    assert ok


@pytest.mark.xfail(strict=True, reason="the N-vs-2N difference decays like N^(-1/2), not 1/N; "
                   "see the exact-norm oracle printed in the criterion line")
def test_10_wick2_rate():
    t0 = time.perf_counter()
    Ns = [8, 16, 32, 64, 128]
    est, se, exact = [], [], []
    for N in Ns:
        spec = MeasureSpec(N=2 * N)
        e, s = mc_functional_l2(lambda c, N=N: wick2_difference(c, N), spec, 4000, seed=10)
        est.append(e)
        se.append(s)
        exact.append(wick2_exact_norm(spec, N))
    fit = fit_loglog(Ns, est, se)
    exact_slope = fit_loglog(Ns, exact)["slope"]
    ok = record(10, -1.3 <= fit["slope"] <= -0.7,
                f"MC slope {fit['slope']:.3f} (CI {fit['ci'][0]:.3f}..{fit['ci'][1]:.3f}) in [-1.3, -0.7]; "
                f"exact-norm slope {exact_slope:.3f}", time.perf_counter() - t0, 180)
    assert ok


def test_11_asymptotic_stationarity():
    t0 = time.perf_counter()
    rep = default_report("decay_scan", n_sweep="8,16,32,64", m=2000, ells="0,2")
    zero = rep.find("ell=0", "l2_norm")
    two = rep.find("ell=2", "l2_norm")
    dec = rep.find("ell=2", "strictly_decreasing")[0]
    slope = rep.find("ell=2", "slope")[0]
    ok = rep.passed and all(r.verdict == "PASS" for r in zero) and dec.verdict == "PASS" and slope.verdict == "PASS"
    ok = record(11, ok, "||D_N E_2|| = " + ", ".join(f"{r.estimate:.3e}" for r in two)
                + f"; slope {slope.estimate:.3f} <= -0.3; ell=0 max {max(r.estimate for r in zero):.1e}",
                time.perf_counter() - t0, 600)
    assert ok


def test_12_measure_invariance():
    t0 = time.perf_counter()
    rep = default_report("invariance", n_sweep="16,32,64", m=2000, t=1.0)
    at64 = [r for r in rep.rows if r.quantity == "drift_in_se" and r.N == 64]
    dist = rep.find("panel", "density_l2_distance")
    dec = rep.find("panel", "drift_decreasing")
    ok = (not rep.aborted and len(at64) == 7 and all(r.verdict == "PASS" for r in at64)
          and dec and dec[0].verdict == "PASS")
    ok = record(12, ok, f"max drift at N=64 {max((r.estimate for r in at64), default=float('nan')):.2f} SE <= 3; "
                "density L2 distance " + ", ".join(f"N={r.N}: {r.estimate:.2e}" for r in dist)
                + (" decreasing" if dec and dec[0].verdict == "PASS" else " NOT decreasing"),
                time.perf_counter() - t0, 1200)
    assert ok


SMALL = {
    "conservation": "[common]\nn = 8\nt = 0.2\n",
    "liouville": "[common]\nt = 0.1\n[liouville]\nn_states = 5\n",
    "gauge_suite": "[gauge_suite]\nn_states = 5\nn_sweep = 4,8,16\nn_logdet = 1\n",
    "decay_scan": "[common]\nm = 300\n[decay_scan]\nn_sweep = 8,16,32\n",
    "invariance": "[common]\nm = 300\nt = 0.05\n[invariance]\nn_sweep = 8,16\n",
    "flow_nearness": "[common]\nt = 0.2\n[flow_nearness]\nn_sweep = 4,8,16\n",
}


def test_13_determinism(tmp_path):
    t0 = time.perf_counter()
    bad = []
    for command, text in SMALL.items():
        cfg = tmp_path / f"{command}.ini"
        cfg.write_text(text)
        bodies = []
        for workers in (1, 2, 1):
            out = tmp_path / f"{command}-{len(bodies)}.csv"
            main([command, "--config", str(cfg), "--out", str(out), "--workers", str(workers)])
            bodies.append(out.read_bytes())
        if len(set(bodies)) != 1:
            bad.append(command)
    ok = record(13, not bad, "byte-identical CSV for all six commands at workers 1, 2, 1"
                if not bad else f"differences in {bad}", time.perf_counter() - t0)
    assert ok
