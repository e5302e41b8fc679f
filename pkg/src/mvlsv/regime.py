"""Regime factor f, the coefficient matrices B^eps / A^eps and the ellipticity certificate.

All array helpers take the density vector with the regime axis first, so ``u`` of
shape ``(N, *batch)`` gives ``B`` of shape ``(N, *batch)`` and ``A`` of shape
``(N, N, *batch)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CertificateUnavailable, ValidationError

COERCIVITY_TOL = 1e-10


@dataclass(frozen=True)
class RegimeSpec:
    """Discrete volatility factor: ``f[n]`` for regimes ``n = 0..N-1`` and regularization ``epsilon``."""

    f: tuple
    epsilon: float

    def __post_init__(self):
        f = tuple(float(v) for v in np.atleast_1d(np.asarray(self.f, dtype=float)))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        errors = []
        if len(f) < 2:
            errors.append(f"f: need at least 2 regimes, got {len(f)}")
        if not all(math.isfinite(v) and v > 0 for v in f):
            errors.append(f"f: all entries must be finite and > 0, got {f}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            errors.append(f"epsilon: must be > 0, got {self.epsilon}")
        if errors:
            raise ValidationError("; ".join(errors))

    @property
    def n_regimes(self) -> int:
        return len(self.f)

    @property
    def f_array(self) -> np.ndarray:
        return np.asarray(self.f)

    @property
    def f_min(self) -> float:
        return min(self.f)

    @property
    def f_max(self) -> float:
        return max(self.f)

    @property
    def f_bar(self) -> float:
        return sum(self.f) / len(self.f)

    @property
    def is_constant(self) -> bool:
        return self.f_min == self.f_max

    def with_epsilon(self, epsilon: float) -> "RegimeSpec":
        return RegimeSpec(self.f, epsilon)


@dataclass(frozen=True)
class SmallRangeReport:
    kappa0: float
    beta_f: float
    lhs: float
    rhs: float
    holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CoefficientMatrixSet:
    B: np.ndarray
    A: np.ndarray
    u: np.ndarray
    D: Optional[np.ndarray] = field(default=None, repr=False)
    rho: Optional[float] = None


@dataclass(frozen=True)
class EllipticityCertificate:
    """Coercivity constants for Gamma = J + delta*I, valid for every u >= 0 and every epsilon."""

    delta: float
    eta: Optional[float]
    kappa: float
    kappa_tilde: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CertificateCheck:
    margin: float
    passed: bool
    samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def kappa0(f: Sequence[float]) -> float:
    f = np.asarray(f, dtype=float)
    n = f.size
    total, total_inv = f.sum(), (1.0 / f).sum()
    worst = max(math.sqrt((total - fk) * (total_inv - 1.0 / fk)) for fk in f)
    return float(0.5 * (n + 1 - worst))


def beta(f: Sequence[float]) -> float:
    f = np.asarray(f, dtype=float)
    fmin, fmax = f.min(), f.max()
    spread = math.sqrt(float(((f - f.mean()) ** 2).sum()))
    return float((fmax - fmin) / fmin + spread / fmin)


def small_range_check(spec: RegimeSpec) -> SmallRangeReport:
    k0 = kappa0(spec.f)
    b = beta(spec.f)
    lhs = min(k0, 1.0)
    return SmallRangeReport(kappa0=k0, beta_f=b, lhs=lhs, rhs=b, holds=bool(lhs > b))


def _check_u(u: np.ndarray, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[0] != n:
        raise ValidationError(f"u: leading axis must have length {n}, got shape {u.shape}")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ValidationError("u: entries must be finite and nonnegative")
    return u


def _expand(f: np.ndarray, ndim: int) -> np.ndarray:
    return f.reshape(f.shape + (1,) * (ndim - 1))


def b_diag(f: np.ndarray, epsilon: float, u: np.ndarray) -> np.ndarray:
    """Diagonal of B^eps(u); ``u`` has the regime axis first. No validation."""
    fe = _expand(f, u.ndim)
    su = u.sum(axis=0)
    sf = (fe * u).sum(axis=0)
    return (epsilon + fe * su) / (epsilon + sf)


def a_matrix(f: np.ndarray, epsilon: float, u: np.ndarray) -> np.ndarray:
    """A^eps(u) with shape ``(N, N, *batch)`` such that d/dx[B(u)u] = A(u) du/dx."""
    fe = _expand(f, u.ndim)
    su = u.sum(axis=0)
    sf = (fe * u).sum(axis=0)
    den2 = (epsilon + sf) ** 2
    b = (epsilon + fe * su) / (epsilon + sf)
    fn = fe[:, None]
    fk = fe[None, :]
    # entry (n, k): u_n [eps (f_n - f_k) + f_n (S_f - f_k S_u)] / (eps + S_f)^2, plus B_n on the diagonal
    a = u[:, None] * (epsilon * (fn - fk) + fn * (sf - fk * su)) / den2
    idx = np.arange(f.size)
    a[idx, idx] += b
    return a


def coefficient_matrices(spec: RegimeSpec, u) -> CoefficientMatrixSet:
    """B^eps(u), A^eps(u) for a single nonnegative N-vector, with the D / rho intermediates."""
    f = spec.f_array
    u = _check_u(np.asarray(u, dtype=float).reshape(-1), spec.n_regimes)
    B = b_diag(f, spec.epsilon, u)
    A = a_matrix(f, spec.epsilon, u)
    sf = float(f @ u)
    if u.sum() > 0:
        rho = sf / (spec.epsilon + sf)
        D = (f[:, None] - f[None, :]) * u[:, None] / sf
        np.fill_diagonal(D, f * u.sum() / sf - 1.0)
    else:
        rho, D = None, None
    return CoefficientMatrixSet(B=B, A=A, u=u, D=D, rho=rho)


def ellipticity_certificate(spec: RegimeSpec) -> EllipticityCertificate:
    """Constructive (delta, kappa) such that <X, (J + delta I) A^eps(u) X> >= kappa |X|^2."""
    report = small_range_check(spec)
    if not report.holds:
        raise CertificateUnavailable(report)
    n = spec.n_regimes
    b = report.beta_f
    if b == 0.0:
        # A^eps == I, so the smallest eigenvalue of J + delta I is delta itself
        return EllipticityCertificate(delta=0.5, eta=None, kappa=0.5, kappa_tilde=0.5 / (n + 0.5))

    k0 = report.kappa0
    ratio = 1.0 + spec.f_max / spec.f_min
    eta_minus = 0.5 * (k0 - b) / n**2 / (ratio + b)
    eta_plus = 0.5 * (1.0 - b) / (b * n**2)
    eta = 0.5 * min(eta_minus, eta_plus)

    bracket = ratio * (1.0 + 1.0 / (2.0 * eta)) + 2.0 * b / eta
    delta_minus = n / bracket
    delta_plus = eta * b
    delta = min(0.5 * min(delta_minus, delta_plus), 0.5)

    kappa_minus = min(0.5 * n * (n - delta * bracket), 0.5 * delta * (k0 - b))
    kappa_plus = min(n * (1.0 - b * delta / eta), 0.5 * delta * (1.0 - b))
    kappa = min(kappa_minus, kappa_plus)
    return EllipticityCertificate(
        delta=float(delta), eta=float(eta), kappa=float(kappa), kappa_tilde=float(kappa / (n + delta))
    )


def sample_admissible_u(n: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Log-uniform u in [1e-6, 1e6]^N, shape (N, samples); the first column is the zero vector."""
    u = 10.0 ** rng.uniform(-6.0, 6.0, size=(n, samples))
    u[:, 0] = 0.0
    return u


def rayleigh_margins(spec: RegimeSpec, cert: EllipticityCertificate, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """<X, (J + delta I) A(u) X> / |X|^2 - kappa for paired columns of ``u`` and ``x``."""
    a = a_matrix(spec.f_array, spec.epsilon, u)  # (N, N, S)
    ax = np.einsum("nks,ks->ns", a, x)
    quad = x.sum(axis=0) * ax.sum(axis=0) + cert.delta * (x * ax).sum(axis=0)
    return quad / (x * x).sum(axis=0) - cert.kappa


def verify_certificate(
    spec: RegimeSpec,
    cert: EllipticityCertificate,
    samples: int = 100_000,
    seed: int = 0,
    chunk: int = 50_000,
) -> CertificateCheck:
    if samples < 1:
        raise ValidationError(f"samples: must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    n = spec.n_regimes
    margin = math.inf
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        u = sample_admissible_u(n, m, rng)
        if done > 0:
            u[:, 0] = 10.0 ** rng.uniform(-6.0, 6.0, size=n)
        x = rng.standard_normal((n, m))
        margin = min(margin, float(rayleigh_margins(spec, cert, u, x).min()))
        done += m
    return CertificateCheck(margin=margin, passed=bool(margin >= -COERCIVITY_TOL), samples=samples)
