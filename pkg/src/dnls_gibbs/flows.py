"""Truncated (gauged) DNLS vector fields and their time integration.

The gauged equation is written as d/dt phi = F(phi) with

    F = i phi'' - 2 alpha mu phi' + c1 |phi|^2 phi' + c2 phi^2 conj(phi')
        - i c3 |phi|^4 phi - i c4 mu |phi|^2 phi - i Gamma[phi] phi,

and the truncated flow applies P_N to the nonlinear products. At alpha = 0 the
field reduces to i psi'' + beta P_N (|psi|^2 psi)'.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .gauge import gauge_apply
from .jacobian import real_jacobian
from .spectral import (
    TWO_PI,
    SpectralState,
    band_of,
    derivative_coeffs,
    integral_product,
    mass_coeffs,
    resize,
    to_grid,
    wavenumbers,
)


def paper_alpha(beta: float, k: int) -> float:
    """Gauge parameter cancelling the leading non-quadratic term of the k-th energy."""
    return -(2 * k + 1) / (2 * k + 2) * beta


@dataclass(frozen=True)
class ModelParams:
    beta: float
    alpha: float = 0.0
    k: int = 2
    N: int = 16
    paper_gauge: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if self.paper_gauge and abs(self.alpha - paper_alpha(self.beta, self.k)) > 1e-15:
            raise ValueError(
                f"paper_gauge requires alpha = {paper_alpha(self.beta, self.k)!r}, got {self.alpha!r}")

    @classmethod
    def paper(cls, beta: float, k: int = 2, N: int = 16) -> "ModelParams":
        return cls(beta=beta, alpha=paper_alpha(beta, k), k=k, N=N, paper_gauge=True)

    def with_N(self, N: int) -> "ModelParams":
        return ModelParams(self.beta, self.alpha, self.k, N, self.paper_gauge)


@dataclass(frozen=True)
class GdnlsCoeffs:
    c1: float
    c2: float
    c3: float
    c4: float
    gamma_c5: float  # multiplies ||f||_{L^4}^4
    gamma_c6: float  # multiplies mu^2
    gamma_c7: float  # Gamma contains gamma_c7 * i * int f' conj(f)


def gdnls_coeffs(params: ModelParams) -> GdnlsCoeffs:
    a, b = params.alpha, params.beta
    return GdnlsCoeffs(
        c1=2.0 * (a + b),
        c2=2.0 * a + b,
        c3=-a * a - a * b / 2.0,
        c4=-a * b,
        gamma_c5=3.0 * a * b / (4.0 * np.pi) + a * a / np.pi,
        gamma_c6=-a * a,
        gamma_c7=a / np.pi,
    )


def gamma_functional(state: SpectralState, params: ModelParams) -> float:
    """Gamma[f] = c5 ||f||^4_{L^4} - alpha^2 mu^2 + (i alpha / pi) int f' conj(f)."""
    c = gdnls_coeffs(params)
    l4 = integral_product([(state, False, 0), (state, True, 0), (state, False, 0), (state, True, 0)])
    drift = integral_product([(state, False, 1), (state, True, 0)])
    mu = float(mass_coeffs(state.coeffs))
    total = c.gamma_c5 * l4 + c.gamma_c6 * mu * mu + 1j * c.gamma_c7 * drift
    scale = 1.0 + abs(c.gamma_c5 * l4) + abs(c.gamma_c7 * drift)
    if abs(total.imag) > 1e-10 * scale:
        raise AssertionError(f"Gamma has imaginary residue {total.imag:.3e}")
    return float(total.real)


def _nonlinear_grid(N: int, out_band: int) -> int:
    # quintic products have band 5N; exact projection onto out_band needs M > 5N + out_band
    # 5-smooth lengths time slightly better than the 7- and 11-smooth ones next_fast_len allows
    target = 5 * N + out_band + 1
    return _smooth5(target)


@functools.lru_cache(maxsize=None)
def _smooth5(target: int) -> int:
    best = 1 << max(target - 1, 0).bit_length()
    p5 = 1
    while p5 < best:
        p35 = p5
        while p35 < best:
            m = p35
            while m < target:
                m *= 2
            best = min(best, m)
            p35 *= 3
        p5 *= 5
    return best


def _project_grid(vals: np.ndarray, M: int, out_band: int) -> np.ndarray:
    spec = sfft.fft(vals, axis=-1) / M
    return spec[..., np.arange(-out_band, out_band + 1) % M]


try:  # optional JIT for the pointwise nonlinearity; numpy fallback below
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _pointwise_numpy(u, du, mu, c1, c2, c3, c4):
    a2 = u.real**2 + u.imag**2
    g = c1 * a2 * du - 1j * (a2 * (c3 * a2 + c4 * mu[:, None])) * u
    if c2 != 0.0:
        g += c2 * (u * u) * np.conj(du)
    return g, np.sum(a2 * a2, axis=-1)


def _scatter_numpy(u, ikn, n, idx, buf):
    buf[0][:, idx] = u
    buf[1][:, idx] = u * ikn
    a = u.real**2 + u.imag**2
    return a.sum(axis=-1), a @ n


def _finish_numpy(G, idx, u, n, mu, mu0, s1, l4sum, g5, g6, alpha):
    gam = g5 * l4sum + g6 * mu**2 - 2.0 * alpha * s1
    return G[:, idx] + 1j * (-2.0 * alpha * (mu - mu0)[:, None] * n - gam[:, None]) * u


if numba is not None:
    @numba.njit(cache=True)
    def _pointwise_jit(u, du, mu, c1, c2, c3, c4):  # pragma: no cover - compiled
        B, M = u.shape
        g = np.empty_like(u)
        l4 = np.zeros(B)
        for b in range(B):
            pm = c4 * mu[b]
            acc = 0.0
            for j in range(M):
                x = u[b, j]
                d = du[b, j]
                a2 = x.real * x.real + x.imag * x.imag
                acc += a2 * a2
                g[b, j] = c1 * a2 * d - 1j * (a2 * (c3 * a2 + pm)) * x + c2 * (x * x) * d.conjugate()
            l4[b] = acc
        return g, l4

    @numba.njit(cache=True)
    def _scatter_jit(u, ikn, n, idx, buf):  # pragma: no cover - compiled
        B, K = u.shape
        mu = np.zeros(B)
        s1 = np.zeros(B)
        for b in range(B):
            for j in range(K):
                x = u[b, j]
                a = x.real * x.real + x.imag * x.imag
                mu[b] += a
                s1[b] += n[j] * a
                buf[0, b, idx[j]] = x
                buf[1, b, idx[j]] = x * ikn[j]
        return mu, s1

    @numba.njit(cache=True)
    def _finish_jit(G, idx, u, n, mu, mu0, s1, l4sum, g5, g6, alpha):  # pragma: no cover - compiled
        B, K = u.shape
        out = np.empty_like(u)
        for b in range(B):
            gam = g5 * l4sum[b] + g6 * mu[b] * mu[b] - 2.0 * alpha * s1[b]
            dm = -2.0 * alpha * (mu[b] - mu0[b])
            for j in range(K):
                out[b, j] = G[b, idx[j]] + 1j * (dm * n[j] - gam) * u[b, j]
        return out

    _pointwise = _pointwise_jit
    _scatter, _finish = _scatter_jit, _finish_jit
else:  # pragma: no cover
    _pointwise = _pointwise_numpy
    _scatter, _finish = _scatter_numpy, _finish_numpy


def _field_fast(coeffs: np.ndarray, params: ModelParams, out_band: int | None) -> np.ndarray:
    """Sum F0 + ... + F4 with one stacked inverse FFT and one forward FFT."""
    coeffs = np.asarray(coeffs, dtype=complex)
    N = band_of(coeffs)
    B = N if out_band is None else out_band
    cf = gdnls_coeffs(params)
    n = wavenumbers(N)
    lead = coeffs.shape[:-1]
    c = coeffs.reshape(-1, 2 * N + 1)
    M = _nonlinear_grid(N, B)
    idx = np.arange(-N, N + 1) % M
    buf = np.zeros((2, c.shape[0], M), dtype=complex)
    buf[0][:, idx] = c
    buf[1][:, idx] = c * (1j * n)
    grid = sfft.ifft(buf, axis=-1, norm="forward")
    mu = np.sum(c.real**2 + c.imag**2, axis=-1)
    g, l4sum = _pointwise(grid[0], grid[1], mu, cf.c1, cf.c2, cf.c3, cf.c4)
    proj = sfft.fft(g, axis=-1, norm="forward")[:, np.arange(-B, B + 1) % M]
    l4 = TWO_PI * l4sum / M
    drift = -2.0 * params.alpha * np.sum(n * (c.real**2 + c.imag**2), axis=-1)
    gamma = cf.gamma_c5 * l4 + cf.gamma_c6 * mu**2 + drift
    lin = (-1j * n * n - 2j * params.alpha * mu[:, None] * n - 1j * gamma[:, None]) * c
    out = resize(lin, B) + proj
    return out.reshape(lead + (2 * B + 1,))


def _field_terms(coeffs: np.ndarray, params: ModelParams, out_band: int | None):
    N = band_of(coeffs)
    B = N if out_band is None else out_band
    cf = gdnls_coeffs(params)
    n = wavenumbers(N)
    mu = mass_coeffs(coeffs)[..., None]
    M = _nonlinear_grid(N, B)
    u = to_grid(coeffs, M)
    du = to_grid(derivative_coeffs(coeffs, 1), M)
    a2 = u.real**2 + u.imag**2
    l4 = TWO_PI * np.mean(a2 * a2, axis=-1)
    drift = -2.0 * params.alpha * np.sum(n * np.abs(coeffs) ** 2, axis=-1)  # (i a/pi) int f' conj f
    gamma = cf.gamma_c5 * l4 + cf.gamma_c6 * mu[..., 0] ** 2 + drift
    f0 = (-1j * n * n - 2j * params.alpha * mu * n) * coeffs
    f4 = -1j * np.asarray(gamma)[..., None] * coeffs
    return {
        "F0": resize(f0, B),
        "F1": _project_grid(cf.c1 * a2 * du + cf.c2 * u * u * np.conj(du), M, B),
        "F2": _project_grid(-1j * cf.c3 * a2 * a2 * u, M, B),
        "F3": _project_grid(-1j * cf.c4 * mu * a2 * u, M, B),
        "F4": resize(f4, B),
    }


def gdnls_terms_coeffs(
    coeffs: np.ndarray, params: ModelParams, out_band: int | None = None
) -> dict[str, np.ndarray]:
    """The five groups F0..F4 of the vector field, batched, each projected to out_band.

    F0 linear (dispersion and mu-drift), F1 the derivative cubics, F2 the quintic,
    F3 the mu-weighted cubic, F4 the Gamma potential. out_band = N gives the
    truncated field; out_band >= 5N gives the untruncated one.
    """
    return _field_terms(coeffs, params, out_band)


def gdnls_rhs_coeffs(coeffs: np.ndarray, params: ModelParams, out_band: int | None = None) -> np.ndarray:
    return _field_fast(coeffs, params, out_band)


def gdnls_rhs(state: SpectralState, params: ModelParams) -> SpectralState:
    """Right-hand side of the truncated gauged equation at state (in E_N)."""
    return SpectralState(state.N, gdnls_rhs_coeffs(state.coeffs, params))


class BlowUpError(RuntimeError):
    def __init__(self, t: float, last_state: np.ndarray):
        super().__init__(f"non-finite solution at t={t:.6g}")
        self.t = t
        self.last_state = last_state


def default_dt(N: int) -> float:
    return min(0.5 / max(N, 1) ** 2, 1e-3)


class _Stepper:
    """Integrating-factor RK4 with mu frozen per trajectory (batched)."""

    def __init__(self, coeffs: np.ndarray, params: ModelParams, h: float):
        N = band_of(coeffs)
        n = wavenumbers(N)
        c = coeffs.reshape(-1, 2 * N + 1)
        self.mu0 = mass_coeffs(c)
        self.params = params
        self.cf = gdnls_coeffs(params)
        self.n = n
        self.lin = -1j * n * n - 2j * params.alpha * self.mu0[:, None] * n
        self.h = h
        self.E = np.exp(self.lin * h)
        self.E2 = np.exp(self.lin * h / 2.0)
        self.N = N
        self.M = _nonlinear_grid(N, N)
        self.idx = np.arange(-N, N + 1) % self.M
        # only the retained columns are ever written, so the padding stays zero
        self.buf = np.zeros((2, c.shape[0], self.M), dtype=complex)
        self.ikn = 1j * n

    def nonlinear(self, u: np.ndarray) -> np.ndarray:
        # the part of the field the frozen factor cannot absorb
        cf = self.cf
        mu, s1 = _scatter(u, self.ikn, self.n, self.idx, self.buf)
        grid = sfft.ifft(self.buf, axis=-1, norm="forward")
        g, l4sum = _pointwise(grid[0], grid[1], mu, cf.c1, cf.c2, cf.c3, cf.c4)
        G = sfft.fft(g, axis=-1, norm="forward", overwrite_x=True)
        return _finish(G, self.idx, u, self.n, mu, self.mu0, s1, l4sum,
                       cf.gamma_c5 * TWO_PI / self.M, cf.gamma_c6, self.params.alpha)

    def step(self, u: np.ndarray) -> np.ndarray:
        h, E, E2 = self.h, self.E, self.E2
        k1 = self.nonlinear(u)
        k2 = self.nonlinear(E2 * (u + 0.5 * h * k1))
        k3 = self.nonlinear(E2 * u + 0.5 * h * k2)
        k4 = self.nonlinear(E * u + h * E2 * k3)
        return E * u + (h / 6.0) * (E * k1 + 2.0 * E2 * (k2 + k3) + k4)


# members integrated together; small blocks keep the FFT working set in cache
_BLOCK = 32


def evolve_coeffs(
    coeffs: np.ndarray,
    params: ModelParams,
    T: float,
    dt: float | None = None,
    check_every: int = 16,
    sample_times: list[float] | None = None,
):
    """Batched truncated flow. Returns final coefficients, or (times, snapshots) if sample_times.

    sample_times must be sorted and within [0, T] (or [T, 0]); snapshots are
    taken at the nearest step boundary.
    """
    coeffs = np.array(coeffs, dtype=complex)
    N = band_of(coeffs)
    if N != params.N:
        coeffs = resize(coeffs, params.N)
    if dt is None:
        dt = default_dt(params.N)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(T) / dt > 1e8:
        raise ValueError("|T|/dt exceeds 1e8 steps")
    nsteps = int(math.ceil(abs(T) / dt - 1e-9)) if T != 0 else 0
    if nsteps == 0:
        if sample_times is not None:
            return [0.0] * len(sample_times), [coeffs.copy() for _ in sample_times]
        return coeffs
    h = T / nsteps
    lead = coeffs.shape[:-1]
    flat = coeffs.reshape(-1, 2 * params.N + 1)
    targets = None
    if sample_times is not None:
        targets = sorted(set(int(round(abs(s) / abs(h))) for s in sample_times))
        times = [t * h for t in targets]
        snaps = [np.empty_like(flat) for _ in targets]
    final = np.empty_like(flat)
    for lo in range(0, flat.shape[0], _BLOCK):
        blk = slice(lo, lo + _BLOCK)
        u = flat[blk]
        stepper = _Stepper(u, params, h)
        ti = 0
        if targets is not None:
            while ti < len(targets) and targets[ti] == 0:
                snaps[ti][blk] = u
                ti += 1
        last_good = u
        for s in range(1, nsteps + 1):
            u = stepper.step(u)
            if s % check_every == 0 or s == nsteps:
                if not np.all(np.isfinite(u)):
                    raise BlowUpError(s * h, last_good.reshape(last_good.shape))
                last_good = u
            if targets is not None:
                while ti < len(targets) and targets[ti] == s:
                    snaps[ti][blk] = u
                    ti += 1
        final[blk] = u
    if targets is not None:
        return times, [sn.reshape(lead + (2 * params.N + 1,)) for sn in snaps]
    return final.reshape(lead + (2 * params.N + 1,))


def evolve(state: SpectralState, params: ModelParams, T: float, dt: float | None = None) -> SpectralState:
    """Phi^N_{T,alpha}(state); negative T runs the flow backwards."""
    return SpectralState(params.N, evolve_coeffs(state.coeffs, params, T, dt))


def dnls_evolve_conjugated(
    state: SpectralState, params: ModelParams, T: float, dt: float | None = None
) -> SpectralState:
    """G_{-alpha} Phi^N_{T,alpha} G_alpha (state), images kept in E_N."""
    band = params.N
    start = state if state.N == band else state.with_band(band)
    if params.alpha == 0.0:
        return evolve(start, params, T, dt)
    gauged = gauge_apply(start, params.alpha, band)
    moved = evolve(gauged, params, T, dt)
    return gauge_apply(moved, -params.alpha, band)


def liouville_trace(
    state: SpectralState,
    params: ModelParams,
    h: float = 1e-5,
    group: str | None = None,
    return_scale: bool = False,
):
    """Trace of the real Jacobian of the truncated field, by central differences.

    group selects one of F0..F4; return_scale also returns the Frobenius norm
    of the Jacobian so callers can judge the trace relative to it.
    """
    if params.N > 8:
        raise ValueError("liouville_trace is restricted to N <= 8")
    start = resize(state.coeffs, params.N)

    def field(c):
        if group is None:
            return gdnls_rhs_coeffs(c, params)
        return gdnls_terms_coeffs(c, params)[group]

    J = real_jacobian(field, start, h)
    tr = float(np.trace(J))
    if return_scale:
        return tr, float(np.linalg.norm(J))
    return tr
