"""Integrals of motion E_l of DNLS, their gauged forms, Q_2 weights and the D_N derivative.

Each functional is a sum of terms  coef(alpha, beta) * mu^p * int prod_j u_j^{(a_j)},
with u = phi or conj(phi). Integrals use the physical convention (int over [0, 2pi)),
mu = (1/2pi) ||phi||^2. Monomials are written as strings: "p2 P1" means phi'' conj(phi').
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import fft as sfft

from .flows import ModelParams, evolve_coeffs, gdnls_rhs_coeffs
from .gauge import gauge_apply
from .spectral import TWO_PI, SpectralState, band_of, derivative_coeffs, mass_coeffs, resize, to_grid

ELLS = (0.0, 0.5, 1.0, 1.5, 2.0)
ELL_NAMES = {0.0: "E0", 0.5: "E_half", 1.0: "E1", 1.5: "E_3half", 2.0: "E2"}


class FormulaNotAvailable(ValueError):
    """Only k = 2 has a fully printed gauged energy."""


def ell_key(ell) -> float:
    x = float(ell)
    if x not in ELLS:
        raise ValueError(f"energy index must be one of {ELLS}, got {ell!r}")
    return x


@dataclass(frozen=True)
class Term:
    coef: Callable[[float, float], complex]
    mu_power: int
    monomial: tuple  # ((conj, order), ...)


def _m(spec: str) -> tuple:
    return tuple((tok[0] == "P", int(tok[1:])) for tok in spec.split())


def _t(coef, mu_power, spec) -> Term:
    return Term(coef, mu_power, _m(spec))


_A2 = "p0 P0 "  # |phi|^2


def _ungauged_terms() -> dict[float, list[Term]]:
    return {
        0.0: [_t(lambda a, b: 0.5, 0, "p0 P0")],
        0.5: [
            _t(lambda a, b: 0.5j, 0, "p1 P0"),
            _t(lambda a, b: b / 4, 0, _A2 * 2),
        ],
        1.0: [
            _t(lambda a, b: 0.5, 0, "p1 P1"),
            _t(lambda a, b: 0.75j * b, 0, _A2 + "p1 P0"),
            _t(lambda a, b: b**2 / 4, 0, _A2 * 3),
        ],
        1.5: [
            _t(lambda a, b: 0.5j, 0, "p2 P1"),
            _t(lambda a, b: b / 4, 0, "p1 p1 P0 P0"),
            _t(lambda a, b: 2 * b, 0, _A2 + "p1 P1"),
            _t(lambda a, b: b / 4, 0, "p0 p0 P1 P1"),
            _t(lambda a, b: 1.25j * b**2, 0, _A2 * 2 + "p1 P0"),
            _t(lambda a, b: 5 / 16 * b**3, 0, _A2 * 4),
        ],
        2.0: [
            _t(lambda a, b: 0.5, 0, "p2 P2"),
            _t(lambda a, b: 1.25j * b, 0, _A2 + "p2 P1"),
            _t(lambda a, b: -1.25j * b, 0, _A2 + "p1 P2"),
            _t(lambda a, b: 1.25 * b**2, 0, _A2 + "p1 p1 P0 P0"),
            _t(lambda a, b: 1.25 * b**2, 0, _A2 + "p0 p0 P1 P1"),
            _t(lambda a, b: 6.25 * b**2, 0, _A2 * 2 + "p1 P1"),
            _t(lambda a, b: 35j / 16 * b**3, 0, _A2 * 3 + "p1 P0"),
            _t(lambda a, b: 7 / 16 * b**4, 0, _A2 * 5),
        ],
    }


def _gauged_terms() -> dict[float, list[Term]]:
    pi = np.pi
    q3 = lambda a, b: 4 * a * a + 10 * a * b + 5 * b * b  # noqa: E731
    s3 = lambda a, b: 6 * a * a + 12 * a * b + 5 * b * b  # noqa: E731
    c35 = lambda a, b: 32 * a**3 + 120 * a * a * b + 120 * a * b * b + 35 * b**3  # noqa: E731
    return {
        0.0: [_t(lambda a, b: 0.5, 0, "p0 P0")],
        0.5: [
            _t(lambda a, b: 0.5j, 0, "p1 P0"),
            _t(lambda a, b: (2 * a + b) / 4, 0, _A2 * 2),
            _t(lambda a, b: -pi * a, 2, ""),
        ],
        1.0: [
            _t(lambda a, b: 0.5, 0, "p1 P1"),
            _t(lambda a, b: 1j * a, 1, "p0 P1"),
            _t(lambda a, b: 0.25j * (4 * a + 3 * b), 0, _A2 + "p1 P0"),
            _t(lambda a, b: pi * a * a, 3, ""),
            _t(lambda a, b: -a / 4 * (4 * a + 3 * b), 1, _A2 * 2),
            _t(lambda a, b: (a + b) * (2 * a + b) / 4, 0, _A2 * 3),
        ],
        1.5: [
            _t(lambda a, b: 0.5j, 0, "p2 P1"),
            _t(lambda a, b: -1.5 * a, 1, "p1 P1"),
            _t(lambda a, b: (2 * a + b) / 4, 0, "p1 p1 P0 P0"),
            _t(lambda a, b: (2 * a + b) / 4, 0, "p0 p0 P1 P1"),
            _t(lambda a, b: (5 * a + 4 * b) / 2, 0, _A2 + "p1 P1"),
            _t(lambda a, b: 1.5j * a * a, 2, "p1 P0"),
            _t(lambda a, b: -3j * a * (a + b), 1, _A2 + "p1 P0"),
            _t(lambda a, b: 0.25j * s3(a, b), 0, _A2 * 2 + "p1 P0"),
            _t(lambda a, b: -pi * a**3, 4, ""),
            _t(lambda a, b: 1.5 * a * a * (a + b), 2, _A2 * 2),
            _t(lambda a, b: -a / 4 * s3(a, b), 1, _A2 * 3),
            _t(lambda a, b: (2 * a + b) * q3(a, b) / 16, 0, _A2 * 4),
        ],
        2.0: [
            _t(lambda a, b: 0.5, 0, "p2 P2"),
            _t(lambda a, b: -2j * a, 1, "p2 P1"),
            _t(lambda a, b: 0.25j * (6 * a + 5 * b), 0, _A2 + "p2 P1"),
            _t(lambda a, b: -0.25j * (6 * a + 5 * b), 0, _A2 + "p1 P2"),
            _t(lambda a, b: -0.5j * a, 0, "p1 p1 P0 P1"),
            _t(lambda a, b: 0.5j * a, 0, "p0 p1 P1 P1"),
            _t(lambda a, b: 3 * a * a, 2, "p1 P1"),
            _t(lambda a, b: -10 * a * (a + b), 1, _A2 + "p1 P1"),
            _t(lambda a, b: -a / 4 * (8 * a + 5 * b), 1, "p1 p1 P0 P0"),
            _t(lambda a, b: -a / 4 * (8 * a + 5 * b), 1, "p0 p0 P1 P1"),
            _t(lambda a, b: (4 * a + 5 * b) * (8 * a + 5 * b) / 4, 0, _A2 * 2 + "p1 P1"),
            _t(lambda a, b: 1.25 * (a + b) * (2 * a + b), 0, _A2 + "p0 p0 P1 P1"),
            _t(lambda a, b: 1.25 * (a + b) * (2 * a + b), 0, _A2 + "P0 P0 p1 p1"),
            _t(lambda a, b: -2j * a**3, 3, "p1 P0"),
            _t(lambda a, b: 0.75j * a * a * (4 * a + 5 * b), 2, _A2 + "p1 P0"),
            _t(lambda a, b: -0.75j * a * a * (4 * a + 5 * b), 2, _A2 + "p0 P1"),
            _t(lambda a, b: -0.75j * a * q3(a, b), 1, _A2 * 2 + "p1 P0"),
            _t(lambda a, b: 0.75j * a * q3(a, b), 1, _A2 * 2 + "p0 P1"),
            _t(lambda a, b: 1j / 16 * c35(a, b), 0, _A2 * 3 + "p1 P0"),
            _t(lambda a, b: pi * a**4, 5, ""),
            _t(lambda a, b: -0.5 * a**3 * (4 * a + 5 * b), 3, _A2 * 2),
            _t(lambda a, b: 0.75 * a * a * q3(a, b), 2, _A2 * 3),
            _t(lambda a, b: -a / 16 * c35(a, b), 1, _A2 * 4),
            _t(lambda a, b: (a + b) * (2 * a + b) * (4 * a * a + 14 * a * b + 7 * b * b) / 16, 0, _A2 * 5),
        ],
    }


UNGAUGED = _ungauged_terms()
GAUGED = _gauged_terms()


def terms_for(ell, gauged: bool) -> list[Term]:
    return (GAUGED if gauged else UNGAUGED)[ell_key(ell)]


def _max_degree(terms) -> int:
    return max(len(t.monomial) for t in terms)


class _Grid:
    """Grid values of u^{(a)} and conj(u)^{(a)} for the orders a functional needs."""

    def __init__(self, coeffs: np.ndarray, M: int, orders):
        self.vals = {}
        for a in orders:
            g = to_grid(derivative_coeffs(coeffs, a), M)
            self.vals[(False, a)] = g
            self.vals[(True, a)] = np.conj(g)

    def __getitem__(self, key):
        return self.vals[key]


def _orders(terms) -> set:
    return {a for t in terms for (_, a) in t.monomial} | {0}


def _integrate(factors, shape) -> np.ndarray:
    if not factors:
        return np.ones(shape, dtype=complex)
    prod = factors[0]
    for f in factors[1:]:
        prod = prod * f
    return TWO_PI * prod.mean(axis=-1)


def evaluate_terms(terms, coeffs: np.ndarray, alpha: float, beta: float, check: bool = True) -> np.ndarray:
    """Batched value of sum(terms); asserts the imaginary residue is below 1e-9 of the term scale."""
    coeffs = np.asarray(coeffs, dtype=complex)
    N = band_of(coeffs)
    M = sfft.next_fast_len(_max_degree(terms) * N + 1)
    grid = _Grid(coeffs, M, _orders(terms))
    mu = mass_coeffs(coeffs)
    shape = coeffs.shape[:-1]
    total = np.zeros(shape, dtype=complex)
    scale = np.ones(shape)
    for t in terms:
        val = t.coef(alpha, beta) * mu**t.mu_power * _integrate([grid[f] for f in t.monomial], shape)
        total = total + val
        scale = scale + np.abs(val)
    if check:
        resid = np.max(np.abs(total.imag) / scale)
        if resid > 1e-9:
            raise AssertionError(f"energy has relative imaginary residue {resid:.3e}")
    return total.real


def directional_terms(
    terms, coeffs: np.ndarray, direction: np.ndarray, alpha: float, beta: float
) -> np.ndarray:
    """d/dt sum(terms)[phi + t v] at t = 0 (Leibniz rule over every factor and mu)."""
    coeffs = np.asarray(coeffs, dtype=complex)
    direction = np.asarray(direction, dtype=complex)
    N, B = band_of(coeffs), band_of(direction)
    deg = _max_degree(terms)
    M = sfft.next_fast_len(max(deg - 1, 0) * N + B + 1)
    orders = _orders(terms)
    g = _Grid(coeffs, M, orders)
    dv = _Grid(direction, M, orders)
    mu = mass_coeffs(coeffs)
    B_common = min(N, B)
    mu_dot = 2.0 * np.sum(
        (np.conj(resize(coeffs, B_common)) * resize(direction, B_common)).real, axis=-1)
    shape = coeffs.shape[:-1]
    total = np.zeros(shape, dtype=complex)
    scale = np.ones(shape)
    for t in terms:
        c = t.coef(alpha, beta)
        factors = [g[f] for f in t.monomial]
        acc = np.zeros(shape, dtype=complex)
        if t.mu_power:
            acc = acc + t.mu_power * mu ** (t.mu_power - 1) * mu_dot * _integrate(factors, shape)
        for j, f in enumerate(t.monomial):
            swapped = factors[:j] + [dv[f]] + factors[j + 1:]
            acc = acc + mu**t.mu_power * _integrate(swapped, shape)
        total = total + c * acc
        scale = scale + np.abs(c * acc)
    resid = np.max(np.abs(total.imag) / scale)
    if resid > 1e-9:
        raise AssertionError(f"energy derivative has relative imaginary residue {resid:.3e}")
    return total.real


def energy(state: SpectralState, ell, beta: float) -> float:
    """E_ell[psi] for ell in {0, 1/2, 1, 3/2, 2}."""
    return float(evaluate_terms(terms_for(ell, False), state.coeffs, 0.0, beta))


def gauged_energy(state: SpectralState, ell, alpha: float, beta: float) -> float:
    """Gauged integral of motion, equal to E_ell[G_{-alpha} phi]."""
    return float(evaluate_terms(terms_for(ell, True), state.coeffs, alpha, beta))


def _require_k2(k: int):
    if k != 2:
        raise FormulaNotAvailable(f"Q_k is only available for k = 2, got k = {k}")


def qk_coeffs(coeffs: np.ndarray, k: int, beta: float) -> np.ndarray:
    _require_k2(k)
    return evaluate_terms(UNGAUGED[2.0][1:], coeffs, 0.0, beta)


def tilde_qk_coeffs(coeffs: np.ndarray, k: int, alpha: float, beta: float) -> np.ndarray:
    _require_k2(k)
    return evaluate_terms(GAUGED[2.0][1:], coeffs, alpha, beta)


def qk(state: SpectralState, k: int, beta: float) -> float:
    """Q_k = E_k - (1/2) ||psi||^2_{H^k dot} (physical)."""
    return float(qk_coeffs(state.coeffs, k, beta))


def tilde_qk(state: SpectralState, k: int, alpha: float, beta: float) -> float:
    return float(tilde_qk_coeffs(state.coeffs, k, alpha, beta))


def gauge_energy_identity_residual(
    state: SpectralState, ell, alpha: float, beta: float, out_band: int | None = None
) -> float:
    """|gauged E_ell[G_alpha psi] - E_ell[psi]|."""
    if out_band is None:
        out_band = 8 * max(state.N, 1)
    phi = gauge_apply(state, alpha, out_band)
    return abs(gauged_energy(phi, ell, alpha, beta) - energy(state, ell, beta))


def dN_energy_coeffs(
    coeffs: np.ndarray,
    ell,
    params: ModelParams,
    mode: str = "leibniz",
    h: float = 1e-3,
) -> np.ndarray:
    """Batched time derivative at t = 0 of the gauged E_ell along the truncated flow.

    leibniz: chain rule applied to the truncated right-hand side.
    tail: minus the chain rule applied to P_{>N} of the untruncated field; equals
          leibniz exactly when the functional is conserved by the full equation.
    finite_difference: Richardson-extrapolated central differences of the flow.
    """
    terms = terms_for(ell, True)
    a, b = params.alpha, params.beta
    c = resize(np.asarray(coeffs, dtype=complex), params.N)
    if mode == "leibniz":
        return directional_terms(terms, c, gdnls_rhs_coeffs(c, params), a, b)
    if mode == "tail":
        N = params.N
        full = gdnls_rhs_coeffs(c, params, out_band=5 * N)
        full[..., 4 * N:6 * N + 1] = 0.0  # keep only |n| > N
        return -directional_terms(terms, c, full, a, b)
    if mode == "finite_difference":
        def central(step):
            sub = step / 8.0
            fwd = evolve_coeffs(c, params, step, dt=sub, check_every=10**9)
            bwd = evolve_coeffs(c, params, -step, dt=sub, check_every=10**9)
            return (evaluate_terms(terms, fwd, a, b) - evaluate_terms(terms, bwd, a, b)) / (2 * step)

        d1, d2 = central(h), central(h / 2)
        return (4.0 * d2 - d1) / 3.0
    raise ValueError(f"unknown mode {mode!r}")


def dN_energy(
    state: SpectralState, ell, params: ModelParams, mode: str = "leibniz", h: float = 1e-3
) -> float:
    return float(dN_energy_coeffs(state.coeffs, ell, params, mode, h))


def energy_row(state: SpectralState, params: ModelParams) -> dict[str, float]:
    """All tabulated functionals of one state (ungauged at beta, gauged at params.alpha)."""
    row = {}
    for ell in ELLS:
        row[ELL_NAMES[ell]] = energy(state, ell, params.beta)
    for ell in (0.0, 1.0, 2.0):
        row["g" + ELL_NAMES[ell]] = gauged_energy(state, ell, params.alpha, params.beta)
    row["Q2"] = qk(state, 2, params.beta)
    row["tQ2"] = tilde_qk(state, 2, params.alpha, params.beta)
    return row
