"""Finite-volume solver for the N-regime nonlinear Fokker-Planck system in divergence form.

    dp/dt = 1/2 d/dx[sigma^2 A(p) dp/dx] + d/dx[(sigma sigma' + 1/2 sigma^2) B(p) p]

Each implicit Euler step freezes A and B at a Picard iterate. The diagonal of A is
treated implicitly (one tridiagonal solve per regime) while the off-diagonal coupling
uses the current iterate; the Picard loop then restores the full coupling. Faces at
the ends of the truncated domain carry zero flux, so the trapezoidal mass of every
regime is conserved by construction.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .errors import CertificateUnavailable, NumericalError, PicardWarning, ValidationError
from .kernel import KernelSpec, convolution_matrix, trapezoid_weights
from .localvol import VolSurface, vol_eval
from .regime import (
    RegimeSpec,
    a_matrix,
    b_diag,
    ellipticity_certificate,
    rayleigh_margins,
)

DEFAULT_PICARD = (5, 1e-10)
GUARD_EVERY = 100
GUARD_SAMPLES = 100


@dataclass(frozen=True)
class PdeGrid:
    x_min: float
    x_max: float
    n_x: int
    t_step: float
    n_t: int

    def __post_init__(self):
        errors = []
        if not self.x_max > self.x_min:
            errors.append(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if self.n_x < 16:
            errors.append(f"n_x: need >= 16 nodes, got {self.n_x}")
        if not self.t_step > 0:
            errors.append(f"t_step: must be > 0, got {self.t_step}")
        if self.n_t < 1:
            errors.append(f"n_t: must be >= 1, got {self.n_t}")
        if errors:
            raise ValidationError("; ".join(errors))

    @classmethod
    def desk(cls, center: float = 0.0, horizon: float = 1.0, half_width: float = 6.0, n_x: int = 601, t_step: float = 1e-3):
        n_t = max(1, int(round(horizon / t_step)))
        return cls(center - half_width, center + half_width, n_x, horizon / n_t, n_t)

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def horizon(self) -> float:
        return self.n_t * self.t_step

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.t_step

    @property
    def volumes(self) -> np.ndarray:
        return self.h * trapezoid_weights(self.n_x)


@dataclass(frozen=True)
class InitialMixture:
    """Per-regime weight P(Y = n) and gaussian law of X_0 given Y = n."""

    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        mu = tuple(float(v) for v in self.means)
        s = tuple(float(v) for v in self.stds)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)
        errors = []
        if not (len(w) == len(mu) == len(s)):
            errors.append("weights, means and stds must have equal length")
        if any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-12:
            errors.append(f"weights: must be nonnegative and sum to 1, got {w}")
        if any(not v > 0 for v in s):
            errors.append(f"stds: must be > 0, got {s}")
        if errors:
            raise ValidationError("; ".join(errors))

    @classmethod
    def uniform(cls, n: int, mean: float = 0.0, std: float = 0.25):
        return cls((1.0 / n,) * n, (mean,) * n, (std,) * n)

    @property
    def n_regimes(self) -> int:
        return len(self.weights)

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))


@dataclass
class GridDensity:
    """Trajectory p_n(t_k, x_j); ``values`` has shape (n_times, N, n_x)."""

    times: np.ndarray
    x: np.ndarray
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def t_step(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else math.inf

    def masses(self) -> np.ndarray:
        return self.values @ (self.h * trapezoid_weights(self.x.size))

    def moments(self, k: int = -1, regime: Optional[int] = None):
        """Grid mean and variance of X at time index ``k`` (all regimes pooled by default)."""
        p = self.values[k].sum(axis=0) if regime is None else self.values[k, regime]
        wq = p * trapezoid_weights(self.x.size)
        mass = wq.sum()
        mean = (wq * self.x).sum() / mass
        var = (wq * (self.x - mean) ** 2).sum() / mass
        return float(mean), float(var)


@dataclass
class StepInfo:
    iterations: int
    increment: float
    converged: bool
    clipped_mass: float
    raw_mass_drift: float


def init_density(mix: InitialMixture, grid: PdeGrid) -> np.ndarray:
    """P_n on the grid, shape (N, n_x), with trapezoidal mass exactly w_n."""
    x = grid.x
    vol = grid.volumes
    rows = []
    for w, mu, s in zip(mix.weights, mix.means, mix.stds):
        lo, hi = mu - 8 * s, mu + 8 * s
        if lo < grid.x_min or hi > grid.x_max:
            truncated = 1.0 - (ndtr((grid.x_max - mu) / s) - ndtr((grid.x_min - mu) / s))
            raise ValidationError(
                f"grid [{grid.x_min}, {grid.x_max}] too narrow for N({mu}, {s}^2): "
                f"needs [{lo}, {hi}], truncated mass {truncated:.3e}"
            )
        row = np.exp(-0.5 * ((x - mu) / s) ** 2)
        mass = row @ vol
        rows.append(row * (w / mass) if w > 0 else np.zeros_like(x))
    return np.vstack(rows)


def _l2(diff: np.ndarray, vol: np.ndarray) -> float:
    return math.sqrt(float(((diff * diff) @ vol).sum()))


def _face_coefficients(surface: VolSurface, t: float, x_face: np.ndarray):
    sig, dsig = vol_eval(surface, min(t, surface.horizon), x_face)
    return 0.5 * sig * sig, sig * dsig + 0.5 * sig * sig


def _tridiagonal_solve(vol_dt, a, b, rhs):
    """Solve the cell balance for one regime; ``a`` (diffusion/h) and ``b`` (advection/2) live on faces."""
    n = vol_dt.size
    ab = np.zeros((3, n))
    diag = vol_dt.copy()
    diag[:-1] += a - b
    diag[1:] += a + b
    ab[1] = diag
    ab[0, 1:] = -a - b  # coefficient of p_{j+1} in row j
    ab[2, :-1] = -a + b  # coefficient of p_{j} in row j+1
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def fp_step(
    state: np.ndarray,
    spec: RegimeSpec,
    surface: VolSurface,
    grid: PdeGrid,
    t_next: float,
    mollify: Optional[KernelSpec] = None,
    picard: tuple = DEFAULT_PICARD,
    conv: Optional[np.ndarray] = None,
    warn: bool = True,
):
    """Advance ``state`` (N x n_x) by one implicit step ending at ``t_next``; returns (state, StepInfo)."""
    max_iters, tol = picard
    p_old = np.asarray(state, dtype=float)
    n_reg, n_x = p_old.shape
    if n_reg != spec.n_regimes or n_x != grid.n_x:
        raise ValidationError(f"state shape {p_old.shape} does not match ({spec.n_regimes}, {grid.n_x})")
    if mollify is not None and conv is None:
        conv = convolution_matrix(n_x, grid.h, mollify)

    h, dt = grid.h, grid.t_step
    vol = grid.volumes
    vol_dt = vol / dt
    x_face = grid.x[:-1] + 0.5 * h
    diff, adv = _face_coefficients(surface, t_next, x_face)
    f = spec.f_array
    masses_old = p_old @ vol

    q = p_old
    increment = math.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        u = np.maximum(q, 0.0)
        if conv is not None:
            u = u @ conv.T
        u_face = 0.5 * (u[:, :-1] + u[:, 1:])
        A = a_matrix(f, spec.epsilon, u_face)
        B = b_diag(f, spec.epsilon, u_face)
        dq = np.diff(q, axis=1) / h
        p_new = np.empty_like(p_old)
        for n in range(n_reg):
            off = (A[n] * dq).sum(axis=0) - A[n, n] * dq[n]
            expl = diff * off
            rhs = vol_dt * p_old[n]
            rhs[:-1] += expl
            rhs[1:] -= expl
            p_new[n] = _tridiagonal_solve(vol_dt, diff * A[n, n] / h, 0.5 * adv * B[n], rhs)
        if not np.all(np.isfinite(p_new)):
            raise NumericalError(f"non-finite density at t={t_next:.6g} (Picard iteration {iterations})")
        increment = _l2(p_new - q, vol)
        q = p_new
        if increment < tol:
            break
    converged = increment < tol
    if not converged and warn:
        warnings.warn(
            f"Picard iteration at t={t_next:.6g} stopped after {max_iters} iterations, increment {increment:.3e}",
            PicardWarning,
            stacklevel=2,
        )

    raw = q @ vol
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = np.where(masses_old > 0, np.abs(raw - masses_old) / masses_old, np.abs(raw))
    neg = np.minimum(q, 0.0)
    clipped = float(-(neg @ vol).sum() / max(masses_old.sum(), 1e-300))
    out = np.maximum(q, 0.0)
    cur = out @ vol
    scale = np.divide(masses_old, cur, out=np.zeros_like(cur), where=cur > 0)
    out *= scale[:, None]
    info = StepInfo(iterations, increment, converged, clipped, float(drift.max()))
    return out, info


def _coercivity_guard(state, spec, cert, conv, rng) -> int:
    u = np.maximum(state, 0.0)
    if conv is not None:
        u = u @ conv.T
    cols = rng.integers(0, state.shape[1], size=GUARD_SAMPLES)
    x = rng.standard_normal((spec.n_regimes, GUARD_SAMPLES))
    margins = rayleigh_margins(spec, cert, u[:, cols], x)
    return int(np.count_nonzero(margins < -1e-10))


def fp_solve(
    mix: InitialMixture,
    spec: RegimeSpec,
    surface: VolSurface,
    grid: PdeGrid,
    mollify: Optional[KernelSpec] = None,
    picard: tuple = DEFAULT_PICARD,
    initial: Optional[np.ndarray] = None,
) -> GridDensity:
    """March fp_step from t = 0 to the grid horizon and keep every time level."""
    if mix.n_regimes != spec.n_regimes:
        raise ValidationError(f"mixture has {mix.n_regimes} regimes, spec has {spec.n_regimes}")
    p = init_density(mix, grid) if initial is None else np.asarray(initial, dtype=float)
    conv = convolution_matrix(grid.n_x, grid.h, mollify) if mollify is not None else None
    try:
        cert = ellipticity_certificate(spec)
    except CertificateUnavailable:
        cert = None
    rng = np.random.default_rng(0)

    values = np.empty((grid.n_t + 1,) + p.shape)
    values[0] = p
    iters, unconverged, worst_inc = [], 0, 0.0
    drift = clipped = 0.0
    violations = 0
    for k in range(1, grid.n_t + 1):
        p, info = fp_step(p, spec, surface, grid, k * grid.t_step, mollify, picard, conv, warn=False)
        values[k] = p
        iters.append(info.iterations)
        if not info.converged:
            unconverged += 1
            worst_inc = max(worst_inc, info.increment)
        drift = max(drift, info.raw_mass_drift)
        clipped = max(clipped, info.clipped_mass)
        if cert is not None and k % GUARD_EVERY == 0:
            violations += _coercivity_guard(p, spec, cert, conv, rng)
    if unconverged:
        warnings.warn(
            f"Picard iteration hit max_iters={picard[0]} on {unconverged} of {grid.n_t} steps "
            f"(largest final increment {worst_inc:.3e})",
            PicardWarning,
            stacklevel=2,
        )
    traj = GridDensity(grid.times, grid.x, values)
    masses = traj.masses()
    w0 = masses[0]
    rel = np.where(w0 > 0, np.abs(masses - w0) / np.where(w0 > 0, w0, 1.0), np.abs(masses))
    traj.diagnostics = {
        "picard_iterations": iters,
        "picard_unconverged_steps": unconverged,
        "picard_max_final_increment": worst_inc,
        "mass_drift": float(rel.max()),
        "raw_mass_drift": drift,
        "clipped_mass": clipped,
        "coercivity_violations": violations,
        "mollify_delta": None if mollify is None else mollify.delta,
    }
    return traj


def linear_fp_solve(p0: np.ndarray, surface: VolSurface, grid: PdeGrid) -> np.ndarray:
    """Single-regime linear equation (A = 1, B = 1); returns all time levels, shape (n_t + 1, n_x)."""
    h, dt = grid.h, grid.t_step
    vol = grid.volumes
    x_face = grid.x[:-1] + 0.5 * h
    out = np.empty((grid.n_t + 1, grid.n_x))
    out[0] = p = np.asarray(p0, dtype=float)
    for k in range(1, grid.n_t + 1):
        diff, adv = _face_coefficients(surface, k * dt, x_face)
        p = _tridiagonal_solve(vol / dt, diff / h, 0.5 * adv, vol / dt * p)
        out[k] = p
    return out


def mollified_gap(traj_plain: GridDensity, traj_moll: GridDensity) -> float:
    """sup over time of sum_n ||p_n - p~_n||_{L2}^2 on the shared grid."""
    if traj_plain.values.shape != traj_moll.values.shape or not np.allclose(traj_plain.x, traj_moll.x):
        raise ValidationError("trajectories live on different grids")
    if not np.allclose(traj_plain.times, traj_moll.times):
        raise ValidationError("trajectories have different time grids")
    vol = traj_plain.h * trapezoid_weights(traj_plain.x.size)
    d = traj_plain.values - traj_moll.values
    return float(((d * d) @ vol).sum(axis=1).max())


def time_index(traj: GridDensity, t: float) -> int:
    if not (-1e-12 <= t <= traj.times[-1] + 1e-9):
        raise ValidationError(f"t={t} outside [0, {traj.times[-1]}]")
    k = int(math.floor(t / traj.t_step + 1e-9))
    return min(max(k, 0), traj.times.size - 1)


def density_at(traj: GridDensity, t: float, x, n: int):
    """p_n(t, x): left piecewise-constant in time, linear in x, zero off the grid."""
    if not 0 <= n < traj.values.shape[1]:
        raise ValidationError(f"regime index {n} out of range 0..{traj.values.shape[1] - 1}")
    row = traj.values[time_index(traj, t), n]
    xs = np.asarray(x, dtype=float)
    out = np.interp(xs, traj.x, row, left=0.0, right=0.0)
    return float(out) if out.ndim == 0 else out


def write_snapshots_csv(path, traj: GridDensity, times) -> None:
    """Rows ``t,x,regime,value`` (regimes labelled 1..N) at the requested times."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "regime", "value"])
        for t in times:
            k = time_index(traj, t)
            tk = repr(float(traj.times[k]))
            for n in range(traj.values.shape[1]):
                for xj, v in zip(traj.x, traj.values[k, n]):
                    w.writerow([tk, repr(float(xj)), n + 1, repr(float(v))])
    tmp.replace(path)


def write_diagnostics_json(path, traj: GridDensity) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(traj.diagnostics, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
