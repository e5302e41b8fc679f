"""Euler-Maruyama simulation of the interacting particle system and its mean-field couplings."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng
from .errors import NumericalError, ValidationError
from .fokker_planck import GridDensity, InitialMixture, time_index
from .kernel import KernelSpec, convolution_matrix, kde_multi
from .localvol import VolSurface, vol_eval
from .regime import RegimeSpec


@dataclass
class ParticleEnsemble:
    """Log-prices ``X``, regimes ``Y`` (0-based) and counter-based stream ids."""

    X: np.ndarray
    Y: np.ndarray
    stream_ids: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=np.int64)
        self.stream_ids = np.asarray(self.stream_ids, dtype=np.int64)
        if not (self.X.shape == self.Y.shape == self.stream_ids.shape) or self.X.ndim != 1:
            raise ValidationError("X, Y and stream_ids must be 1-D arrays of equal length")

    @property
    def M(self) -> int:
        return self.X.size

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.X.copy(), self.Y.copy(), self.stream_ids.copy())

    def permuted(self, perm) -> "ParticleEnsemble":
        return ParticleEnsemble(self.X[perm], self.Y[perm], self.stream_ids[perm])


@dataclass
class SimConfig:
    spec: RegimeSpec
    surface: VolSurface
    mix: InitialMixture
    M: int
    kernel: KernelSpec = field(default_factory=KernelSpec)
    t_step: float = 1e-2
    T: float = 1.0
    seed: int = 0
    kde_method: str = "binned"
    snapshot_times: tuple = ()
    threads: int = 1

    def __post_init__(self):
        errors = []
        if self.M < 2:
            errors.append(f"M: need at least 2 particles, got {self.M}")
        if not 0 < self.t_step <= self.T:
            errors.append(f"t_step: need 0 < t_step <= T, got t_step={self.t_step}, T={self.T}")
        elif abs(self.T / self.t_step - round(self.T / self.t_step)) > 1e-9 * self.T / self.t_step:
            errors.append(f"T={self.T} is not a whole number of steps of {self.t_step}")
        if self.kde_method not in ("naive", "binned"):
            errors.append(f"kde_method: expected 'naive' or 'binned', got {self.kde_method!r}")
        if self.mix.n_regimes != self.spec.n_regimes:
            errors.append(f"mixture has {self.mix.n_regimes} regimes, spec has {self.spec.n_regimes}")
        if self.T > self.surface.horizon * (1 + 1e-12):
            errors.append(f"T={self.T} exceeds the volatility surface horizon {self.surface.horizon}")
        if any(not 0 <= t <= self.T for t in self.snapshot_times):
            errors.append("snapshot_times: must lie in [0, T]")
        if errors:
            raise ValidationError("; ".join(errors))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.t_step))

    def snapshot_steps(self) -> list:
        times = self.snapshot_times or (self.T,)
        return sorted({int(round(t / self.t_step)) for t in times})


@dataclass
class Snapshot:
    t: float
    X: np.ndarray
    Y: np.ndarray
    sq_coef: np.ndarray  # R * sigma(t, X)^2, the squared diffusion coefficient used from time t


@dataclass
class SimResult:
    snapshots: list
    final: ParticleEnsemble
    coef_stats: dict


@dataclass
class CoupledGapReport:
    sup_gap_hat: np.ndarray
    sup_gap_tilde: np.ndarray
    sup_gap_tilde_hat: np.ndarray
    ms_gap_hat: float
    ms_gap_tilde: float
    ms_gap_tilde_hat: float

    def to_dict(self) -> dict:
        return {
            "ms_gap_hat": self.ms_gap_hat,
            "ms_gap_tilde": self.ms_gap_tilde,
            "ms_gap_tilde_hat": self.ms_gap_tilde_hat,
            "max_sup_gap_hat": float(self.sup_gap_hat.max()),
            "max_sup_gap_tilde": float(self.sup_gap_tilde.max()),
            "M": int(self.sup_gap_hat.size),
        }


def sample_initial(mix: InitialMixture, M: int, seed: int) -> ParticleEnsemble:
    """i.i.d. (X_0, Y) with P(Y = n) = w_n and X_0 | Y = n ~ N(mu_n, s_n^2)."""
    if M < 1:
        raise ValidationError(f"M: must be >= 1, got {M}")
    u = rng.uniform_block(seed, rng.INIT, 0, M)
    z = rng.normal_block(seed, rng.INIT, 1, M)
    cdf = np.cumsum(mix.weights)
    cdf[-1] = 1.0
    y = np.searchsorted(cdf, u, side="right")
    # zero-weight regimes are never selected even at float ties
    y = np.minimum(y, len(cdf) - 1)
    mu = np.asarray(mix.means)[y]
    s = np.asarray(mix.stds)[y]
    return ParticleEnsemble(mu + s * z, y, np.arange(M))


def ratio_coefficient(x, y, ensemble_kde, spec: RegimeSpec):
    """R = (eps + f(y) * plain) / (eps + f_weighted); ``x`` is carried for signature symmetry only."""
    plain, weighted = ensemble_kde
    f = spec.f_array
    return (spec.epsilon + f[np.asarray(y)] * np.asarray(plain)) / (spec.epsilon + np.asarray(weighted))


def _particle_ratio(X, Y, spec: RegimeSpec, kernel: KernelSpec, method: str, threads: int):
    if spec.is_constant:
        return np.ones_like(X)
    fy = spec.f_array[Y]
    plain, weighted = kde_multi(X, np.vstack([np.ones_like(X), fy]), X, kernel, method, threads)
    return (spec.epsilon + fy * plain) / (spec.epsilon + weighted)


def _density_ratio(x, Y, rows: np.ndarray, grid_x: np.ndarray, spec: RegimeSpec):
    """R from grid densities ``rows`` (N x n_x): plain = sum_n p_n, weighted = sum_n f(n) p_n."""
    if spec.is_constant:
        return np.ones_like(x)
    f = spec.f_array
    plain = np.interp(x, grid_x, rows.sum(axis=0), left=0.0, right=0.0)
    weighted = np.interp(x, grid_x, f @ rows, left=0.0, right=0.0)
    return (spec.epsilon + f[Y] * plain) / (spec.epsilon + weighted)


def _em_update(X, R, sig, dt, noise):
    return X - 0.5 * R * sig * sig * dt + np.sqrt(R) * sig * math.sqrt(dt) * noise


def _check_finite(X, k):
    bad = np.flatnonzero(~np.isfinite(X))
    if bad.size:
        raise NumericalError(f"non-finite position at step {k} for particle {int(bad[0])}")


def simulate_particles(config: SimConfig, ensemble: Optional[ParticleEnsemble] = None) -> SimResult:
    """Run the interacting system; the KDE is refreshed over the whole cloud each step."""
    ens = sample_initial(config.mix, config.M, config.seed) if ensemble is None else ensemble.copy()
    spec, surface, dt = config.spec, config.surface, config.t_step
    X, Y = ens.X, ens.Y
    snap_steps = set(config.snapshot_steps())
    snapshots = []
    r_min, r_max = math.inf, -math.inf
    s2_min, s2_max = math.inf, -math.inf
    for k in range(config.n_steps + 1):
        t = k * dt
        R = _particle_ratio(X, Y, spec, config.kernel, config.kde_method, config.threads)
        sig, _ = vol_eval(surface, t, X)
        sq = R * sig * sig
        if k in snap_steps:
            snapshots.append(Snapshot(t, X.copy(), Y.copy(), sq))
        if k == config.n_steps:
            break
        r_min, r_max = min(r_min, float(R.min())), max(r_max, float(R.max()))
        s2_min, s2_max = min(s2_min, float(sq.min())), max(s2_max, float(sq.max()))
        noise = rng.normal_block(config.seed, rng.PARTICLE_NOISE, k, config.M)[ens.stream_ids]
        X = _em_update(X, R, sig, dt, noise)
        _check_finite(X, k)
    stats = {"R_min": r_min, "R_max": r_max, "sq_coef_min": s2_min, "sq_coef_max": s2_max, "steps": config.n_steps}
    return SimResult(snapshots, ParticleEnsemble(X, Y, ens.stream_ids), stats)


def _mollified_rows(traj: GridDensity, kernel: KernelSpec):
    conv = convolution_matrix(traj.x.size, traj.h, kernel)
    cache = {}

    def rows(k):
        if k not in cache:
            cache[k] = traj.values[k] @ conv.T
        return cache[k]

    return rows


def simulate_coupled(config: SimConfig, traj_hat: GridDensity, traj_tilde: GridDensity) -> CoupledGapReport:
    """Particle system, X-hat (coefficients from p-hat) and X-tilde (from W * p-tilde) on shared noise."""
    for name, traj in (("traj_hat", traj_hat), ("traj_tilde", traj_tilde)):
        if traj.times[-1] < config.T - 1e-9:
            raise ValidationError(f"{name} ends at t={traj.times[-1]}, before T={config.T}")
        if traj.values.shape[1] != config.spec.n_regimes:
            raise ValidationError(f"{name} has {traj.values.shape[1]} regimes, spec has {config.spec.n_regimes}")
    spec, surface, dt = config.spec, config.surface, config.t_step
    ens = sample_initial(config.mix, config.M, config.seed)
    Y = ens.Y
    X = ens.X.copy()
    Xh = ens.X.copy()
    Xt = ens.X.copy()
    tilde_rows = _mollified_rows(traj_tilde, config.kernel)
    gap_h = np.zeros(config.M)
    gap_t = np.zeros(config.M)
    gap_th = np.zeros(config.M)
    for k in range(config.n_steps):
        t = k * dt
        noise = rng.normal_block(config.seed, rng.PARTICLE_NOISE, k, config.M)[ens.stream_ids]

        R = _particle_ratio(X, Y, spec, config.kernel, config.kde_method, config.threads)
        sig, _ = vol_eval(surface, t, X)
        X = _em_update(X, R, sig, dt, noise)

        Rh = _density_ratio(Xh, Y, traj_hat.values[time_index(traj_hat, t)], traj_hat.x, spec)
        sig, _ = vol_eval(surface, t, Xh)
        Xh = _em_update(Xh, Rh, sig, dt, noise)

        Rt = _density_ratio(Xt, Y, tilde_rows(time_index(traj_tilde, t)), traj_tilde.x, spec)
        sig, _ = vol_eval(surface, t, Xt)
        Xt = _em_update(Xt, Rt, sig, dt, noise)

        for arr in (X, Xh, Xt):
            _check_finite(arr, k)
        np.maximum(gap_h, np.abs(X - Xh), out=gap_h)
        np.maximum(gap_t, np.abs(X - Xt), out=gap_t)
        np.maximum(gap_th, np.abs(Xt - Xh), out=gap_th)
    return CoupledGapReport(
        sup_gap_hat=gap_h,
        sup_gap_tilde=gap_t,
        sup_gap_tilde_hat=gap_th,
        ms_gap_hat=float(np.mean(gap_h**2)),
        ms_gap_tilde=float(np.mean(gap_t**2)),
        ms_gap_tilde_hat=float(np.mean(gap_th**2)),
    )


def sample_marginal(mix: InitialMixture, M: int, seed: int, purpose: int = rng.LOCALVOL_INIT) -> np.ndarray:
    """X_0 drawn from the x-marginal of the mixture, on its own substream."""
    u = rng.uniform_block(seed, purpose, 0, M)
    z = rng.normal_block(seed, purpose, 1, M)
    cdf = np.cumsum(mix.weights)
    cdf[-1] = 1.0
    y = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    return np.asarray(mix.means)[y] + np.asarray(mix.stds)[y] * z


def simulate_local_vol(surface: VolSurface, mix: InitialMixture, M: int, t_step: float, T: float, seed: int) -> np.ndarray:
    """Samples of X_T for dX = -1/2 sigma^2 dt + sigma dB (the log of the local-vol benchmark)."""
    X = sample_marginal(mix, M, seed)
    n_steps = int(round(T / t_step)) if T > 0 else 0
    for k in range(n_steps):
        sig, _ = vol_eval(surface, k * t_step, X)
        noise = rng.normal_block(seed, rng.LOCALVOL_NOISE, k, M)
        X = _em_update(X, 1.0, sig, t_step, noise)
        _check_finite(X, k)
    return X


def write_snapshots_csv(path, snapshots) -> None:
    """Rows ``time,particle,regime,x`` with regimes labelled 1..N."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "particle", "regime", "x"])
        for snap in snapshots:
            t = repr(float(snap.t))
            for i, (y, x) in enumerate(zip(snap.Y, snap.X)):
                w.writerow([t, i, int(y) + 1, repr(float(x))])
    tmp.replace(path)


def write_gap_report_json(path, report: CoupledGapReport) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
