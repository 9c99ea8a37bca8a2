"""Gauge group G_alpha f = exp(i alpha I[f]) f and its finite-dimensional flow."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as sfft
from scipy.integrate import RK45

from .spectral import (
    TWO_PI,
    SpectralState,
    band_of,
    from_grid,
    grid_size,
    resize,
    to_grid,
    wavenumbers,
)


class GaugeFlowError(RuntimeError):
    """The truncated gauge flow could not be integrated."""


class StepLimitExceeded(GaugeFlowError):
    pass


class ToleranceFailure(GaugeFlowError):
    pass


@dataclass(frozen=True)
class GaugeFlowConfig:
    alpha: float
    N: int
    ode_tol: float = 1e-10
    max_steps: int = 100_000

    def __post_init__(self):
        if not (0.0 < self.ode_tol <= 1e-3):
            raise ValueError(f"ode_tol must lie in (0, 1e-3], got {self.ode_tol}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.N < 0:
            raise ValueError("N must be nonnegative")


def modulus_sq_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Coefficients (band 2N) of |f|^2, computed alias-free."""
    N = band_of(coeffs)
    M = grid_size(2 * N)
    vals = to_grid(coeffs, M)
    return from_grid(np.abs(vals) ** 2 + 0j, 2 * N)


def primitive_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """I[f](m) = -(i/m) (|f|^2)(m) for m != 0, I[f](0) = 0; band 2N."""
    sq = modulus_sq_coeffs(coeffs)
    m = wavenumbers(band_of(sq))
    out = np.zeros_like(sq)
    nz = m != 0
    out[..., nz] = -1j * sq[..., nz] / m[nz]
    return out


def primitive_I(state: SpectralState) -> SpectralState:
    return SpectralState(2 * state.N, primitive_coeffs(state.coeffs))


def gauge_apply_coeffs(
    coeffs: np.ndarray, alpha: float, out_band: int, oversample: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Batched exp(i alpha I[f]) f projected to out_band; also returns the dropped mass."""
    N = band_of(coeffs)
    if out_band < N:
        raise ValueError(f"out_band {out_band} below input band {N}")
    M = grid_size(max(oversample * out_band, 2 * N))
    f = to_grid(coeffs, M)
    prim = to_grid(primitive_coeffs(coeffs), M).real
    g = np.exp(1j * alpha * prim) * f
    full = sfft.fft(g, axis=-1) / M
    idx = np.arange(-out_band, out_band + 1) % M
    kept = full[..., idx]
    dropped = np.ones(M, dtype=bool)
    dropped[idx] = False
    residual = np.sum(np.abs(full[..., dropped]) ** 2, axis=-1)
    return kept, residual


def gauge_apply(
    state: SpectralState,
    alpha: float,
    out_band: int | None = None,
    oversample: int = 4,
    return_residual: bool = False,
):
    """Exact gauge image evaluated on an oversized grid, projected to out_band.

    The image is not band-limited. With return_residual the sequence-mass
    sum_{|n| > out_band} |G f(n)|^2 discarded by the projection is returned too.
    """
    if out_band is None:
        out_band = state.N
    kept, residual = gauge_apply_coeffs(state.coeffs, alpha, out_band, oversample)
    out = SpectralState(out_band, kept)
    if return_residual:
        return out, float(residual)
    return out


def l2_distance(a: SpectralState, b: SpectralState) -> float:
    """Physical L^2 distance (int |a - b|^2)^{1/2}."""
    M = max(a.N, b.N)
    d = resize(a.coeffs, M) - resize(b.coeffs, M)
    return float(np.sqrt(TWO_PI * np.sum(np.abs(d) ** 2)))


def gauge_group_compose_check(
    state: SpectralState, alpha1: float, alpha2: float, oversample: int = 8
) -> float:
    """||G_{a1} G_{a2} f - G_{a1+a2} f||_{L^2} with every image kept at band oversample*N."""
    band = max(oversample * state.N, 1)
    inner = gauge_apply(state, alpha2, band)
    composed = gauge_apply(inner, alpha1, band)
    direct = gauge_apply(state, alpha1 + alpha2, band)
    return l2_distance(composed, direct)


def gauge_field_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Vector field i P_N(I[g] g) of the truncated gauge flow."""
    N = band_of(coeffs)
    M = grid_size(4 * N)
    g = to_grid(coeffs, M)
    prim = to_grid(primitive_coeffs(coeffs), M).real
    return 1j * from_grid(prim * g, N)


@lru_cache(maxsize=64)
def _harmonic_window(N: int) -> np.ndarray:
    """H[n-1] = sum_{m=N-n+1}^{N+n} 1/m for n = 1..N."""
    partial = np.concatenate(([0.0], np.cumsum(1.0 / np.arange(1, 2 * N + 1))))
    n = np.arange(1, N + 1)
    table = partial[N + n] - partial[N - n]
    table.setflags(write=False)
    return table


def gauge_divergence_coeffs(coeffs: np.ndarray, N: int) -> np.ndarray:
    c = resize(coeffs, N) if band_of(coeffs) != N else coeffs
    if N == 0:
        return np.zeros(c.shape[:-1])
    a = np.abs(c) ** 2
    neg = a[..., N - 1::-1]  # |f(-n)|^2 for n = 1..N
    pos = a[..., N + 1:]
    return 2.0 * np.sum((neg - pos) * _harmonic_window(N), axis=-1)


def gauge_divergence(state: SpectralState, N: int) -> float:
    """div of i P_N(I[f] f): 2 sum_n sum_{m != 0, |n-m| <= N} |f(n-m)|^2 / m, in O(N)."""
    if state.N > N:
        raise ValueError(f"state band {state.N} exceeds N={N}")
    return float(gauge_divergence_coeffs(state.coeffs, N))


def _gauge_trajectory(state: SpectralState, cfg: GaugeFlowConfig, with_logdet: bool):
    if state.N > cfg.N:
        raise ValueError(f"state band {state.N} exceeds N={cfg.N}")
    y0 = resize(state.coeffs, cfg.N)
    if cfg.alpha == 0.0:
        return y0, 0.0, 0

    def rhs(_a, y):
        return gauge_field_coeffs(y)

    scale = max(float(np.max(np.abs(y0))), 1e-300)
    solver = RK45(rhs, 0.0, y0, cfg.alpha, rtol=cfg.ode_tol, atol=cfg.ode_tol * scale,
                  first_step=min(abs(cfg.alpha), 0.05))
    logdet = 0.0
    div_prev = gauge_divergence_coeffs(y0, cfg.N) if with_logdet else 0.0
    steps = 0
    while solver.status == "running":
        if steps >= cfg.max_steps:
            raise StepLimitExceeded(
                f"gauge flow used {steps} steps before alpha={cfg.alpha} (reached {solver.t})")
        t_old = solver.t
        msg = solver.step()
        if solver.status == "failed":
            raise ToleranceFailure(f"gauge flow failed at alpha={solver.t}: {msg}")
        steps += 1
        if with_logdet:
            # composite Simpson on the accepted step, midpoint from the dense interpolant
            mid = solver.dense_output()(0.5 * (t_old + solver.t))
            div_mid = gauge_divergence_coeffs(mid, cfg.N)
            div_new = gauge_divergence_coeffs(solver.y, cfg.N)
            logdet += (solver.t - t_old) / 6.0 * (div_prev + 4.0 * div_mid + div_new)
            div_prev = div_new
    return solver.y, float(logdet), steps


def gauge_truncated(state: SpectralState, cfg: GaugeFlowConfig) -> SpectralState:
    """G^N_alpha f: integrate d/dalpha g = i P_N(I[g] g) from 0 to cfg.alpha."""
    y, _, _ = _gauge_trajectory(state, cfg, with_logdet=False)
    return SpectralState(cfg.N, y)


def gauge_logdet(state: SpectralState, cfg: GaugeFlowConfig) -> float:
    """log det of the real Jacobian of G^N_alpha at f, i.e. int_0^alpha div along the orbit."""
    _, logdet, _ = _gauge_trajectory(state, cfg, with_logdet=True)
    return logdet


def gauge_truncated_with_logdet(state: SpectralState, cfg: GaugeFlowConfig) -> tuple[SpectralState, float]:
    y, logdet, _ = _gauge_trajectory(state, cfg, with_logdet=True)
    return SpectralState(cfg.N, y), logdet
