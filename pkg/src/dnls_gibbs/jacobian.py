"""Finite-difference Jacobians in the real coordinates (Re f(n), Im f(n))."""

from __future__ import annotations

from typing import Callable

import numpy as np


def to_real(coeffs: np.ndarray) -> np.ndarray:
    out = np.empty(coeffs.shape[:-1] + (2 * coeffs.shape[-1],))
    out[..., 0::2] = coeffs.real
    out[..., 1::2] = coeffs.imag
    return out


def from_real(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2] + 1j * x[..., 1::2]


def real_jacobian(fun: Callable[[np.ndarray], np.ndarray], coeffs: np.ndarray, h: float) -> np.ndarray:
    """Central-difference Jacobian of a map E_N -> E_M in real coordinates.

    All 2(2N+1) perturbed points are evaluated as one batch.
    """
    x0 = to_real(np.asarray(coeffs, dtype=complex))
    d = x0.size
    pts = np.concatenate([x0 + h * np.eye(d), x0 - h * np.eye(d)])
    vals = to_real(fun(from_real(pts)))
    return ((vals[:d] - vals[d:]) / (2.0 * h)).T
