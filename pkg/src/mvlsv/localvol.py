"""Dupire local volatility in log-strike coordinates and bounded bilinear evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

DEGENERATE_GAMMA = 1e-12


@dataclass(frozen=True)
class CallSurface:
    t_grid: np.ndarray
    k_grid: np.ndarray
    prices: np.ndarray  # shape (n_t, n_k)

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        k = np.asarray(self.k_grid, dtype=float)
        c = np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "k_grid", k)
        object.__setattr__(self, "prices", c)
        if c.shape != (t.size, k.size):
            raise ValidationError(f"prices: shape {c.shape} does not match grids ({t.size}, {k.size})")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(k) <= 0):
            raise ValidationError("t_grid and k_grid must be strictly increasing")
        if np.any(k <= 0):
            raise ValidationError("k_grid: strikes must be positive")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValidationError("prices: must be finite and nonnegative")

    def arbitrage_violations(self, tol: float = 1e-8) -> list:
        """(i, j, kind) for nodes breaking convexity in K or monotonicity in t."""
        out = []
        c, k = self.prices, self.k_grid
        slopes = np.diff(c, axis=1) / np.diff(k)
        bad = np.argwhere(np.diff(slopes, axis=1) < -tol)
        out += [(int(i), int(j) + 1, "convexity") for i, j in bad]
        bad = np.argwhere(np.diff(c, axis=0) < -tol)
        out += [(int(i) + 1, int(j), "calendar") for i, j in bad]
        return out


@dataclass(frozen=True)
class VolSurface:
    """sigma(t, x) on a tensor grid in (time, log-strike), clamped to [sigma0, sigma1]."""

    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray  # shape (n_t, n_x)
    sigma0: float
    sigma1: float
    flags: tuple = field(default=(), compare=False)

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.t_grid, dtype=float))
        x = np.atleast_1d(np.asarray(self.x_grid, dtype=float))
        v = np.asarray(self.values, dtype=float).reshape(t.size, x.size)
        if not 0 < self.sigma0 <= self.sigma1:
            raise ValidationError(f"clamp: need 0 < sigma0 <= sigma1, got ({self.sigma0}, {self.sigma1})")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(x) <= 0):
            raise ValidationError("t_grid and x_grid must be strictly increasing")
        if t[0] < 0:
            raise ValidationError("t_grid: times must be >= 0")
        v = np.clip(v, self.sigma0, self.sigma1)
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "x_grid", x)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "sigma0", float(self.sigma0))
        object.__setattr__(self, "sigma1", float(self.sigma1))

    @classmethod
    def constant(cls, sigma: float, horizon: float = 1.0, sigma0: float | None = None, sigma1: float | None = None):
        return cls(
            t_grid=np.array([0.0, horizon]),
            x_grid=np.array([0.0]),
            values=np.full((2, 1), sigma),
            sigma0=sigma if sigma0 is None else sigma0,
            sigma1=sigma if sigma1 is None else sigma1,
        )

    @property
    def horizon(self) -> float:
        return float(self.t_grid[-1])

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values.flat[0]))

    @property
    def dsigma_bound(self) -> float:
        """Largest |d sigma / dx| of the interpolant."""
        if self.x_grid.size < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.values, axis=1)) / np.diff(self.x_grid)))


def vol_eval(surface: VolSurface, t: float, x):
    """(sigma, dsigma/dx) at time ``t`` for scalar or array ``x``.

    Linear in t between time nodes (flat outside them), linear in x inside the grid
    and flat beyond it, where the derivative is zero.
    """
    if not (0.0 <= t <= surface.horizon * (1 + 1e-12)):
        raise ValidationError(f"t={t} outside [0, {surface.horizon}]")
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if surface.is_constant:
        sig = np.full(xs.shape, surface.values.flat[0])
        dsig = np.zeros(xs.shape)
        return (float(sig[0]), 0.0) if scalar else (sig, dsig)

    tg = surface.t_grid
    if tg.size == 1 or t <= tg[0]:
        row = surface.values[0]
    elif t >= tg[-1]:
        row = surface.values[-1]
    else:
        i = int(np.searchsorted(tg, t, side="right")) - 1
        w = (t - tg[i]) / (tg[i + 1] - tg[i])
        row = (1.0 - w) * surface.values[i] + w * surface.values[i + 1]

    xg = surface.x_grid
    if xg.size == 1:
        sig = np.full(xs.shape, row[0])
        dsig = np.zeros(xs.shape)
    else:
        j = np.clip(np.searchsorted(xg, xs, side="right") - 1, 0, xg.size - 2)
        slope = (row[j + 1] - row[j]) / (xg[j + 1] - xg[j])
        inside = (xs >= xg[0]) & (xs <= xg[-1])
        xc = np.clip(xs, xg[0], xg[-1])
        sig = row[j] + slope * (xc - xg[j])
        dsig = np.where(inside, slope, 0.0)
    sig = np.clip(sig, surface.sigma0, surface.sigma1)
    if scalar:
        return float(sig[0]), float(dsig[0])
    return sig, dsig


def _second_difference(c: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Three-point d2C/dK2 along axis 1 on a possibly nonuniform grid; edge nodes reuse the neighbor stencil."""
    hm = k[1:-1] - k[:-2]
    hp = k[2:] - k[1:-1]
    inner = 2.0 * ((c[:, 2:] - c[:, 1:-1]) / hp - (c[:, 1:-1] - c[:, :-2]) / hm) / (hp + hm)
    return np.concatenate([inner[:, :1], inner, inner[:, -1:]], axis=1)


def dupire_local_vol(calls: CallSurface, clamp: tuple) -> VolSurface:
    """sigma_loc(t, K) = sqrt(2 dC/dt / (K^2 d2C/dK2)), re-indexed in x = log K.

    Nodes with a degenerate butterfly (d2C/dK2 <= 1e-12) or a non-increasing calendar
    spread are clamped and listed in ``flags`` as ``(t, K, reason)``.
    """
    sigma0, sigma1 = clamp
    t, k, c = calls.t_grid, calls.k_grid, calls.prices
    if k.size < 3 or t.size < 2:
        raise ValidationError(f"need >= 3 strikes and >= 2 times, got {k.size} and {t.size}")
    dc_dt = np.gradient(c, t, axis=0, edge_order=1)
    d2c = _second_difference(c, k)

    flags = []
    butterfly = d2c <= DEGENERATE_GAMMA
    calendar = dc_dt <= 0.0
    for i, j in np.argwhere(butterfly):
        flags.append((float(t[i]), float(k[j]), "butterfly"))
    for i, j in np.argwhere(calendar):
        flags.append((float(t[i]), float(k[j]), "calendar"))

    with np.errstate(divide="ignore", invalid="ignore"):
        var = 2.0 * dc_dt / (k[None, :] ** 2 * np.maximum(d2c, DEGENERATE_GAMMA))
    var = np.where(calendar, sigma0**2, var)
    var = np.clip(var, sigma0**2, sigma1**2)
    return VolSurface(t_grid=t, x_grid=np.log(k), values=np.sqrt(var), sigma0=sigma0, sigma1=sigma1, flags=tuple(flags))


def black_scholes_call(spot, strike, t, vol):
    """Undiscounted Black-Scholes call price (zero rates)."""
    from scipy.special import ndtr

    spot, strike, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (spot, strike, t)))
    sd = vol * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(spot / strike) / sd + 0.5 * sd
    price = spot * ndtr(d1) - strike * ndtr(d1 - sd)
    return np.where(t > 0, price, np.maximum(spot - strike, 0.0))


# ---------------------------------------------------------------------------
# CSV: header ``t,<axis>,value``, one row per node, time-major


def _write_grid_csv(path, axis: str, t, a, values):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", axis, "value"])
        for i, ti in enumerate(t):
            for j, aj in enumerate(a):
                w.writerow([repr(float(ti)), repr(float(aj)), repr(float(values[i, j]))])
    tmp.replace(path)


def _read_grid_csv(path, axis: str):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["t", axis, "value"]:
        raise ValidationError(f"{path}: expected header 't,{axis},value'")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        raise ValidationError(f"{path}: no data rows")
    t = np.unique(data[:, 0])
    a = np.unique(data[:, 1])
    if data.shape[0] != t.size * a.size:
        raise ValidationError(f"{path}: rows do not form a full ({t.size} x {a.size}) grid")
    vals = np.empty((t.size, a.size))
    vals[np.searchsorted(t, data[:, 0]), np.searchsorted(a, data[:, 1])] = data[:, 2]
    return t, a, vals


def write_call_surface(path, calls: CallSurface):
    _write_grid_csv(path, "k", calls.t_grid, calls.k_grid, calls.prices)


def read_call_surface(path) -> CallSurface:
    t, k, c = _read_grid_csv(path, "k")
    return CallSurface(t, k, c)


def write_vol_surface(path, surface: VolSurface):
    _write_grid_csv(path, "x", surface.t_grid, surface.x_grid, surface.values)


def read_vol_surface(path, sigma0: float, sigma1: float) -> VolSurface:
    t, x, v = _read_grid_csv(path, "x")
    return VolSurface(t, x, v, sigma0, sigma1)


def interior_mask(shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[1:-1, 1:-1] = True
    return mask


def max_interior_error(surface: VolSurface, target: float) -> float:
    v = surface.values[interior_mask(surface.values.shape)]
    return float(np.max(np.abs(v - target))) if v.size else math.nan
