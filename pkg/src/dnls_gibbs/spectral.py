"""Band-limited states on the torus [0, 2pi) and alias-free quadrature.

Convention: f(x) = sum_{|n|<=N} f(n) e^{inx}, f(n) = (1/2pi) int f e^{-inx} dx.
Coefficient arrays keep modes in the order n = -N..N along the last axis, so
every array-level helper here accepts a leading batch shape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import fft as sfft

TWO_PI = 2.0 * np.pi


def band_of(coeffs: np.ndarray) -> int:
    n = coeffs.shape[-1]
    if n % 2 != 1:
        raise ValueError(f"coefficient axis must have odd length, got {n}")
    return (n - 1) // 2


def wavenumbers(N: int) -> np.ndarray:
    return np.arange(-N, N + 1, dtype=float)


def grid_size(band: int) -> int:
    """Smallest FFT-friendly grid resolving a trigonometric polynomial of degree `band`."""
    return sfft.next_fast_len(2 * band + 1)


def quadrature_size(total_band: int) -> int:
    """Grid size on which the trapezoid rule integrates degree `total_band` exactly."""
    return sfft.next_fast_len(total_band + 1)


def _scatter(coeffs: np.ndarray, M: int) -> np.ndarray:
    N = band_of(coeffs)
    if M < N + 1:
        raise ValueError(f"grid of {M} points cannot hold band {N}")
    out = np.zeros(coeffs.shape[:-1] + (M,), dtype=complex)
    idx = np.arange(-N, N + 1) % M
    # M <= 2N folds modes together; summing them still gives exact point values
    if M <= 2 * N:
        np.add.at(out, (..., idx), coeffs)
    else:
        out[..., idx] = coeffs
    return out


def to_grid(coeffs: np.ndarray, M: int) -> np.ndarray:
    """Values on x_j = 2 pi j / M of the band-limited function with these coefficients."""
    return sfft.ifft(_scatter(np.asarray(coeffs, dtype=complex), M), axis=-1) * M


def from_grid(values: np.ndarray, N: int) -> np.ndarray:
    """Coefficients n = -N..N of grid values (exact when the grid function has band < M - N)."""
    M = values.shape[-1]
    spec = sfft.fft(values, axis=-1) / M
    return spec[..., np.arange(-N, N + 1) % M]


def derivative_coeffs(coeffs: np.ndarray, j: int = 1) -> np.ndarray:
    if j == 0:
        return np.array(coeffs, dtype=complex)
    n = wavenumbers(band_of(coeffs))
    return coeffs * (1j * n) ** j


def conj_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Coefficients of the complex conjugate function: (f-bar)(n) = conj(f(-n))."""
    return np.conj(coeffs[..., ::-1])


def resize(coeffs: np.ndarray, M: int) -> np.ndarray:
    """Truncate (M < N) or zero-pad (M > N) a coefficient array to band M."""
    N = band_of(coeffs)
    if M <= N:
        return np.array(coeffs[..., N - M:N + M + 1], dtype=complex)
    out = np.zeros(coeffs.shape[:-1] + (2 * M + 1,), dtype=complex)
    out[..., M - N:M + N + 1] = coeffs
    return out


def mass_coeffs(coeffs: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(coeffs) ** 2, axis=-1)


@dataclass(frozen=True, eq=False)
class SpectralState:
    """Immutable band-limited function, coefficients ordered n = -N..N."""

    N: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex).reshape(-1)
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if c.shape[0] != 2 * self.N + 1:
            raise ValueError(f"expected {2 * self.N + 1} coefficients, got {c.shape[0]}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_coeffs(cls, coeffs: Sequence[complex] | np.ndarray) -> "SpectralState":
        c = np.asarray(coeffs, dtype=complex)
        return cls(band_of(c), c)

    @classmethod
    def zeros(cls, N: int) -> "SpectralState":
        return cls(N, np.zeros(2 * N + 1, dtype=complex))

    @classmethod
    def from_modes(cls, modes: dict[int, complex], N: int | None = None) -> "SpectralState":
        """Build from a sparse {n: f(n)} mapping; N defaults to the largest |n|."""
        if N is None:
            N = max((abs(n) for n in modes), default=0)
        c = np.zeros(2 * N + 1, dtype=complex)
        for n, v in modes.items():
            if abs(n) > N:
                raise ValueError(f"mode {n} outside band {N}")
            c[n + N] = v
        return cls(N, c)

    @classmethod
    def from_grid(cls, values: np.ndarray, N: int) -> "SpectralState":
        return cls(N, from_grid(np.asarray(values, dtype=complex), N))

    def __getitem__(self, n: int) -> complex:
        if abs(n) > self.N:
            return 0j
        return complex(self.coeffs[n + self.N])

    def grid(self, M: int | None = None) -> np.ndarray:
        return to_grid(self.coeffs, grid_size(self.N) if M is None else M)

    def with_band(self, M: int) -> "SpectralState":
        return SpectralState(M, resize(self.coeffs, M))

    def __add__(self, other: "SpectralState") -> "SpectralState":
        M = max(self.N, other.N)
        return SpectralState(M, resize(self.coeffs, M) + resize(other.coeffs, M))

    def __sub__(self, other: "SpectralState") -> "SpectralState":
        return self + (-1.0) * other

    def __mul__(self, a: complex) -> "SpectralState":
        return SpectralState(self.N, self.coeffs * a)

    __rmul__ = __mul__

    def allclose(self, other: "SpectralState", atol: float = 1e-12) -> bool:
        M = max(self.N, other.N)
        return bool(np.allclose(resize(self.coeffs, M), resize(other.coeffs, M), rtol=0, atol=atol))

    # -- serialization -------------------------------------------------
    def to_json_obj(self) -> dict:
        return {"N": int(self.N), "coeffs": [[float(z.real), float(z.imag)] for z in self.coeffs]}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SpectralState":
        N = int(obj["N"])
        pairs = np.asarray(obj["coeffs"], dtype=float).reshape(-1, 2)
        return cls(N, pairs[:, 0] + 1j * pairs[:, 1])

    @classmethod
    def from_json(cls, text: str) -> "SpectralState":
        return cls.from_json_obj(json.loads(text))

    def to_bytes(self) -> bytes:
        """8-byte little-endian N header, then interleaved re/im float64."""
        body = np.empty(2 * (2 * self.N + 1), dtype="<f8")
        body[0::2] = self.coeffs.real
        body[1::2] = self.coeffs.imag
        return struct.pack("<q", self.N) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SpectralState":
        (N,) = struct.unpack("<q", data[:8])
        body = np.frombuffer(data[8:], dtype="<f8")
        if body.size != 2 * (2 * N + 1):
            raise ValueError(f"payload holds {body.size} floats, header N={N} needs {2 * (2 * N + 1)}")
        return cls(N, body[0::2] + 1j * body[1::2])


def project(state: SpectralState, M: int) -> SpectralState:
    """P_M: drop modes with |n| > M, result has band M."""
    if M < 0:
        raise ValueError("M must be nonnegative")
    return SpectralState(M, resize(state.coeffs, M))


def derivative(state: SpectralState, j: int) -> SpectralState:
    return SpectralState(state.N, derivative_coeffs(state.coeffs, j))


def conjugate(state: SpectralState) -> SpectralState:
    return SpectralState(state.N, conj_coeffs(state.coeffs))


def sobolev_norm_sq(
    state: SpectralState,
    s: float,
    convention: str = "sequence",
    homogeneous: bool = False,
) -> float:
    """Sum (1 + n^{2s}) |f(n)|^2, or sum n^{2s} |f(n)|^2 when homogeneous.

    The physical convention multiplies by 2 pi, so that the L^2 case equals int |f|^2.
    """
    if convention not in ("sequence", "physical"):
        raise ValueError(f"unknown convention {convention!r}")
    n = np.abs(wavenumbers(state.N))
    weight = n ** (2 * s) if homogeneous else 1.0 + n ** (2 * s)
    if homogeneous and s == 0:
        weight = np.ones_like(n)
    val = float(np.sum(weight * np.abs(state.coeffs) ** 2))
    return TWO_PI * val if convention == "physical" else val


def mass(state: SpectralState) -> float:
    """mu[f] = (1/2pi) ||f||^2_{L^2} = sum |f(n)|^2."""
    return float(mass_coeffs(state.coeffs))


Factor = tuple  # (SpectralState, conj: bool, order: int)


def integral_product(factors: Iterable[Factor]) -> complex:
    """int_T prod_j u_j^{(a_j)} dx, exact to roundoff.

    Each factor is (state, conj, order); conj selects the complex conjugate of
    the state before differentiating. The trapezoid rule on M > sum of bands
    points is exact for the band-limited integrand.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("integral_product needs at least one factor")
    total = sum(f[0].N for f in factors)
    M = quadrature_size(total)
    prod = np.ones(M, dtype=complex)
    for state, conj, order in factors:
        c = derivative_coeffs(state.coeffs, order)
        vals = to_grid(c, M)
        prod *= np.conj(vals) if conj else vals
    return complex(TWO_PI * prod.mean())
