"""Gaussian measures gamma_k, the mass-restricted measure, Gibbs weights and Monte Carlo estimators.

Random numbers come from a counter-based generator keyed by (seed, sample index):
mode n always reads the same two raw words regardless of N, so truncations of a
sample at different N agree on their common modes.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import brentq

from .gauge import gauge_apply_coeffs
from .invariants import evaluate_terms, qk_coeffs, terms_for, tilde_qk_coeffs
from .spectral import SpectralState, wavenumbers

_MASK64 = (1 << 64) - 1


class StarvationError(RuntimeError):
    """Rejection sampling of the restricted measure accepted too few candidates."""


@dataclass(frozen=True)
class MeasureSpec:
    k: int = 2
    N: int = 16
    variance_convention: str = "wick"
    radii: tuple = (1.0, 4.0)
    R0_restrict: float = 0.1

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if self.variance_convention not in ("wick", "physical"):
            raise ValueError(f"unknown variance convention {self.variance_convention!r}")
        radii = tuple(float(r) for r in self.radii)
        if len(radii) != self.k or any(r <= 0 for r in radii):
            raise ValueError(f"need {self.k} positive radii, got {self.radii!r}")
        object.__setattr__(self, "radii", radii)
        if self.R0_restrict <= 0:
            raise ValueError("R0_restrict must be positive")

    def with_N(self, N: int) -> "MeasureSpec":
        return replace(self, N=N)


def variances(spec: MeasureSpec, N: int | None = None) -> np.ndarray:
    """Per-mode variance v_n = E|f(n)|^2 for n = -N..N."""
    n = wavenumbers(spec.N if N is None else N)
    v = 1.0 / (1.0 + n ** (2 * spec.k))
    if spec.variance_convention == "physical":
        v = v / np.pi
    return v


def _positions(N: int) -> np.ndarray:
    # stream position of mode n: 0, 1, -1, 2, -2, ... -> 0, 1, 2, 3, 4, ...
    n = np.arange(-N, N + 1)
    return np.where(n > 0, 2 * n - 1, -2 * n)


def _key(seed: int, index: int) -> np.ndarray:
    return np.array([seed & _MASK64, index & _MASK64], dtype=np.uint64)


def _uniforms(raw: np.ndarray) -> np.ndarray:
    return (raw >> np.uint64(11)).astype(float) * 2.0**-53


def standard_complex_normals(seed: int, index: int, N: int) -> np.ndarray:
    """a + ib for n = -N..N with a, b iid N(0, 1), via Box-Muller on Philox output."""
    raw = np.random.Philox(key=_key(seed, index)).random_raw(2 * (2 * N + 1))
    u = _uniforms(raw)
    r = np.sqrt(-2.0 * np.log1p(-u[0::2]))  # 1 - u lies in (0, 1]
    z = r * np.exp(2j * np.pi * u[1::2])
    return z[_positions(N)]


def _acceptance_uniform(seed: int, index: int) -> float:
    bg = np.random.Philox(key=_key(seed, index), counter=np.array([0, 0, 0, 1], dtype=np.uint64))
    return float(_uniforms(bg.random_raw(1))[0])


def sample_gamma_coeffs(spec: MeasureSpec, indices: Iterable[int], seed: int) -> np.ndarray:
    sd = np.sqrt(variances(spec) / 2.0)
    return np.array([sd * standard_complex_normals(seed, int(i), spec.N) for i in indices])


def sample_gamma(spec: MeasureSpec, index: int, seed: int) -> SpectralState:
    """Member `index` of the gamma_k stream: f(n) = sqrt(v_n / 2)(a + ib)."""
    return SpectralState(spec.N, sample_gamma_coeffs(spec, [index], seed)[0])


def restriction_tilt(spec: MeasureSpec) -> float:
    """t >= 0 with sum_n v_n / (1 + t v_n) = R0 (or 0 if the mean mass is already below R0).

    Proposals drawn from the tilted Gaussian with variances v_n / (1 + t v_n) are
    accepted with probability 1[mu <= R0] exp(t (mu - R0)); this is exact rejection
    sampling from gamma restricted to {mu <= R0}, and this t maximizes the
    acceptance rate P(mu <= R0) prod(1 + t v_n) exp(-t R0).
    """
    v = variances(spec)
    R = spec.R0_restrict
    if v.sum() <= R:
        return 0.0
    g = lambda t: np.sum(v / (1.0 + t * v)) - R  # noqa: E731
    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
    return float(brentq(g, 0.0, hi, xtol=1e-14, rtol=1e-14))


def expected_acceptance(spec: MeasureSpec, mass_cdf: float) -> float:
    """Acceptance rate of the tilted rejection given P_gamma(mu <= R0)."""
    t = restriction_tilt(spec)
    v = variances(spec)
    return float(mass_cdf * np.exp(np.sum(np.log1p(t * v)) - t * spec.R0_restrict))


@dataclass
class RestrictedDraw:
    coeffs: np.ndarray  # (M, 2N+1)
    indices: np.ndarray  # candidate index of each accepted member
    candidates: int

    @property
    def acceptance(self) -> float:
        return len(self.indices) / max(self.candidates, 1)


def sample_gamma_restricted(
    spec: MeasureSpec, M: int, seed: int, min_acceptance: float = 0.01, probe: int = 500
) -> RestrictedDraw:
    """M exact samples of gamma_k conditioned on mu <= R0, in candidate-index order."""
    t = restriction_tilt(spec)
    v = variances(spec)
    sd = np.sqrt(v / (1.0 + t * v) / 2.0)
    R = spec.R0_restrict
    out, idx = [], []
    cand = 0
    while len(out) < M:
        z = sd * standard_complex_normals(seed, cand, spec.N)
        mu = float(np.sum(np.abs(z) ** 2))
        if mu <= R and _acceptance_uniform(seed, cand) < np.exp(t * (mu - R)):
            out.append(z)
            idx.append(cand)
        cand += 1
        if cand >= probe and len(out) < min_acceptance * cand:
            raise StarvationError(
                f"restricted sampler accepted {len(out)} of {cand} candidates "
                f"(R0={R}, N={spec.N}, {spec.variance_convention} convention)")
    return RestrictedDraw(np.array(out), np.array(idx, dtype=np.int64), cand)


def draw(spec: MeasureSpec, M: int, seed: int, restricted: bool) -> np.ndarray:
    if restricted:
        return sample_gamma_restricted(spec, M, seed).coeffs
    return sample_gamma_coeffs(spec, range(M), seed)


def wick_moment(ns, ms, spec: MeasureSpec) -> float:
    """E[prod_j f(n_j) conj f(m_j)] = sum over permutations of prod delta(m_j, n_s(j)) v_{n_s(j)}."""
    ns, ms = list(ns), list(ms)
    if len(ns) != len(ms):
        raise ValueError("ns and ms must have equal length")
    if len(ns) > 8:
        raise ValueError("wick_moment supports at most 8 pairs")
    big = max([abs(x) for x in ns + ms] + [0])
    v = variances(spec, big)
    total = 0.0
    for perm in itertools.permutations(range(len(ns))):
        prod = 1.0
        for j, s in enumerate(perm):
            if ms[j] != ns[s]:
                prod = 0.0
                break
            prod *= v[ns[s] + big]
        total += prod
    return total


def cutoff_chi(x, R: float = 1.0):
    """Smooth bump: 1 on |x| <= R/2, 0 on |x| >= R, monotone in between."""
    t = 2.0 * (1.0 - np.abs(np.asarray(x, dtype=float) / R))

    def s(y):
        y = np.asarray(y, dtype=float)
        pos = y > 0
        out = np.zeros_like(y)
        out[pos] = np.exp(-1.0 / y[pos])
        return out

    a, b = s(t), s(1.0 - t)
    out = a / (a + b)
    return out if out.ndim else float(out)


def _chi_product(coeffs, spec: MeasureSpec, alpha: float, beta: float, gauged: bool) -> np.ndarray:
    w = np.ones(np.shape(coeffs)[:-1])
    for m, R in enumerate(spec.radii):
        e = evaluate_terms(terms_for(m, gauged), coeffs, alpha, beta)
        w = w * cutoff_chi(e, R)
    return w


def _require_k2(spec: MeasureSpec):
    if spec.k != 2:
        raise ValueError("Gibbs weights need the explicit Q_2, so spec.k must be 2")


def gibbs_weight_coeffs(coeffs, spec: MeasureSpec, beta: float) -> np.ndarray:
    _require_k2(spec)
    return _chi_product(coeffs, spec, 0.0, beta, False) * np.exp(-qk_coeffs(coeffs, spec.k, beta))


def gauged_gibbs_weight_coeffs(coeffs, spec: MeasureSpec, alpha: float, beta: float) -> np.ndarray:
    _require_k2(spec)
    chi = _chi_product(coeffs, spec, alpha, beta, True)
    return chi * np.exp(-tilde_qk_coeffs(coeffs, spec.k, alpha, beta))


def gibbs_weight(state: SpectralState, spec: MeasureSpec, beta: float) -> float:
    """prod_m chi_{R_m}(E_m) exp(-Q_k) at P_N f."""
    return float(gibbs_weight_coeffs(state.with_band(spec.N).coeffs, spec, beta))


def gauged_gibbs_weight(state: SpectralState, spec: MeasureSpec, alpha: float, beta: float) -> float:
    return float(gauged_gibbs_weight_coeffs(state.with_band(spec.N).coeffs, spec, alpha, beta))


def l2_estimate(values: np.ndarray) -> tuple[float, float]:
    """sqrt(mean |F|^2) with a delta-method standard error."""
    sq = np.abs(np.asarray(values)) ** 2
    m = float(sq.mean())
    if m == 0.0:
        return 0.0, 0.0
    se_sq = float(sq.std(ddof=1) / np.sqrt(sq.size))
    est = np.sqrt(m)
    return float(est), se_sq / (2.0 * est)


def mc_functional_l2(
    functional: Callable[[np.ndarray], np.ndarray],
    spec: MeasureSpec,
    M: int,
    seed: int,
    restricted: bool = False,
) -> tuple[float, float]:
    """||F||_{L^2(gamma_k)} (or over the restricted measure) from M draws.

    functional maps a batch of coefficient rows (M, 2N+1) to M values.
    """
    if M < 100:
        raise ValueError("M must be at least 100")
    return l2_estimate(functional(draw(spec, M, seed, restricted)))


def wick2_difference(coeffs: np.ndarray, N: int, k: int = 2) -> np.ndarray:
    """int P_N f^(k-1) P_N conj f^(k) - int P_2N f^(k-1) P_2N conj f^(k), coefficients of band >= 2N."""
    B = (coeffs.shape[-1] - 1) // 2
    n = wavenumbers(B)
    # int g conj h = 2 pi sum g(n) conj h(n); here g(n) = (in)^(k-1) f(n), h(n) = (in)^k f(n)
    sym = (1j * n) ** (k - 1) * np.conj((1j * n) ** k)
    tail = (np.abs(n) > N) & (np.abs(n) <= 2 * N)
    return -2.0 * np.pi * np.sum(sym[tail] * np.abs(coeffs[..., tail]) ** 2, axis=-1)


def wick2_exact_norm(spec: MeasureSpec, N: int, k: int = 2) -> float:
    """Exact L^2(gamma_k) norm of wick2_difference: E|sum c_n |f_n|^2|^2 with Var|f_n|^2 = v_n^2."""
    v = variances(spec, 2 * N)
    n = wavenumbers(2 * N)
    tail = np.abs(n) > N
    c = 2.0 * np.pi * np.abs(n[tail]) ** (2 * k - 1)
    vt = v[tail]
    mean = np.sum(c * np.sign(n[tail]) * vt)  # odd symbol: cancels between n and -n
    return float(np.sqrt(np.sum(c**2 * vt**2) + mean**2))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    return float(s * s / np.sum(w * w)) if s > 0 else 0.0


@dataclass
class Ensemble:
    members: list  # [(SpectralState, weight)]
    seed: int
    spec: MeasureSpec
    indices: list = field(default_factory=list)

    def __post_init__(self):
        w = np.array([m[1] for m in self.members], dtype=float)
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("ensemble weights must be finite and nonnegative")
        if not self.indices:
            self.indices = list(range(len(self.members)))

    @property
    def weights(self) -> np.ndarray:
        return np.array([m[1] for m in self.members], dtype=float)

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([m[0].coeffs for m in self.members])

    def effective_size(self) -> float:
        return effective_sample_size(self.weights)

    def weighted_mean(self, values) -> float:
        w = self.weights
        if w.sum() <= 0:
            raise ValueError("ensemble has no positive weight")
        return float(np.sum(w * np.asarray(values)) / w.sum())

    def to_jsonl(self) -> str:
        lines = []
        for i, (s, w) in zip(self.indices, self.members):
            lines.append(json.dumps({"index": int(i), "weight": float(w), "state": s.to_json_obj()}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str, seed: int, spec: MeasureSpec) -> "Ensemble":
        members, idx = [], []
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                members.append((SpectralState.from_json_obj(rec["state"]), float(rec["weight"])))
                idx.append(int(rec["index"]))
        return cls(members, seed, spec, idx)


def _ensemble(coeffs, weights, seed, spec, indices) -> Ensemble:
    members = [(SpectralState(spec.N, c), float(w)) for c, w in zip(coeffs, weights)]
    return Ensemble(members, seed, spec, [int(i) for i in indices])


def sample_rho_tilde(spec: MeasureSpec, alpha: float, beta: float, M: int, seed: int) -> Ensemble:
    """Restricted-Gaussian members weighted by the gauged Gibbs density."""
    d = sample_gamma_restricted(spec, M, seed)
    w = gauged_gibbs_weight_coeffs(d.coeffs, spec, alpha, beta)
    return _ensemble(d.coeffs, w, seed, spec, d.indices)


def sample_rho_hat(spec: MeasureSpec, alpha: float, beta: float, M: int, seed: int) -> Ensemble:
    """The rho-tilde members pushed through G_{-alpha} (projected to E_N), weights unchanged."""
    rt = sample_rho_tilde(spec, alpha, beta, M, seed)
    pushed, _ = gauge_apply_coeffs(rt.coeffs, -alpha, spec.N)
    return _ensemble(pushed, rt.weights, seed, spec, rt.indices)
