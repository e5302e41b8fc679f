"""Statistical checks: the leverage identity, marginal matching and the propagation-of-chaos curve."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import ks_2samp

from . import rng
from .errors import ValidationError
from .fokker_planck import PdeGrid, fp_solve
from .localvol import VolSurface, vol_eval
from .particles import SimConfig, simulate_coupled

MIN_BIN_COUNT = 30
Z_LIMIT = 3.0
PASS_FRACTION = 0.95


@dataclass
class BinReport:
    center: np.ndarray
    count: np.ndarray
    mean_sq_coef: np.ndarray
    target: np.ndarray
    std_err: np.ndarray
    z: np.ndarray
    admitted: np.ndarray
    passed: bool

    @property
    def pass_fraction(self) -> float:
        ok = np.abs(self.z[self.admitted]) <= Z_LIMIT
        return float(ok.mean()) if ok.size else math.nan

    def rows(self):
        for i in range(self.center.size):
            yield {
                "center": float(self.center[i]),
                "count": int(self.count[i]),
                "mean_sq_coef": float(self.mean_sq_coef[i]),
                "target": float(self.target[i]),
                "std_err": float(self.std_err[i]),
                "z": float(self.z[i]),
                "admitted": bool(self.admitted[i]),
            }

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "pass_fraction": self.pass_fraction,
            "bins": int(self.center.size),
            "admitted_bins": int(self.admitted.sum()),
            "max_abs_z": float(np.max(np.abs(self.z[self.admitted]))) if self.admitted.any() else math.nan,
        }


@dataclass
class ChaosRow:
    M: int
    delta: float
    ms_gap: float
    std_err: float
    ms_gap_tilde: float
    std_err_tilde: float


@dataclass
class ChaosCurve:
    rows: list

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def non_increasing(self, slack: float = 0.10) -> bool:
        g = self.column("ms_gap")
        return bool(np.all(g[1:] <= (1.0 + slack) * g[:-1]))


def leverage_consistency_report(x, sq_coef, t: float, surface: VolSurface, n_bins: int = 20) -> BinReport:
    """Equal-count bins in x; per bin compare mean of Sigma^2 against sigma(t, center)^2."""
    x = np.asarray(x, dtype=float)
    sq = np.asarray(sq_coef, dtype=float)
    if x.shape != sq.shape:
        raise ValidationError("x and sq_coef must have equal length")
    if n_bins < 1 or x.size < n_bins:
        raise ValidationError(f"too few particles ({x.size}) for {n_bins} bins")
    order = np.argsort(x, kind="stable")
    groups = np.array_split(order, n_bins)
    center = np.array([x[g].mean() for g in groups])
    count = np.array([g.size for g in groups])
    mean = np.array([sq[g].mean() for g in groups])
    sd = np.array([sq[g].std(ddof=1) if g.size > 1 else 0.0 for g in groups])
    se = sd / np.sqrt(count)
    sig, _ = vol_eval(surface, t, center)
    target = np.asarray(sig) ** 2
    diff = mean - target
    # summation rounding alone must not register as a deviation
    diff = np.where(np.abs(diff) <= 1e-12 * np.abs(target), 0.0, diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
    admitted = count >= MIN_BIN_COUNT
    ok = np.abs(z[admitted]) <= Z_LIMIT
    passed = bool(ok.size > 0 and ok.mean() >= PASS_FRACTION)
    return BinReport(center, count, mean, target, se, z, admitted, passed)


def marginal_distance(samples_a, samples_b, n_strikes: int = 21):
    """(two-sample KS statistic, RMS gap of undiscounted call prices on exp(X) over a strike grid)."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("marginal_distance: both samples must be nonempty")
    ks = float(ks_2samp(a, b).statistic)
    lo = min(np.quantile(a, 0.005), np.quantile(b, 0.005))
    hi = max(np.quantile(a, 0.995), np.quantile(b, 0.995))
    strikes = np.exp(np.linspace(lo, hi, n_strikes))
    sa, sb = np.exp(a), np.exp(b)
    ca = np.array([np.maximum(sa - k, 0.0).mean() for k in strikes])
    cb = np.array([np.maximum(sb - k, 0.0).mean() for k in strikes])
    return ks, float(np.sqrt(np.mean((ca - cb) ** 2)))


def power_schedule(delta0: float = 0.4, m0: int = 500, exponent: float = 0.125) -> Callable[[int], float]:
    """delta_M = delta0 * (M / m0) ** (-exponent)."""

    def schedule(M: int) -> float:
        return delta0 * (M / m0) ** (-exponent)

    return schedule


def mean_and_se(values: Sequence[float]):
    """Mean and standard error, reduced in sorted order so the result ignores input order."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size < 2:
        return float(v.mean()), math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def chaos_curve(
    base_config: SimConfig,
    M_ladder: Sequence[int],
    delta_schedule: Callable[[int], float],
    repetitions: int,
    grid: Optional[PdeGrid] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> ChaosCurve:
    """Mean-square sup gap between the particle system and its mean-field couplings along a ladder of M."""
    if repetitions < 3:
        raise ValidationError(f"repetitions: need >= 3, got {repetitions}")
    ladder = [int(m) for m in M_ladder]
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValidationError(f"M_ladder must be strictly increasing, got {ladder}")
    cfg = base_config
    if grid is None:
        grid = PdeGrid.desk(center=cfg.mix.mean, horizon=cfg.T)
    traj_hat = fp_solve(cfg.mix, cfg.spec, cfg.surface, grid)
    rows = []
    for rung, M in enumerate(ladder):
        delta = float(delta_schedule(M))
        kernel = cfg.kernel.with_delta(delta)
        traj_tilde = fp_solve(cfg.mix, cfg.spec, cfg.surface, grid, mollify=kernel)
        gaps, gaps_t = [], []
        for rep in range(repetitions):
            run = replace(cfg, M=M, kernel=kernel, seed=rng.child_seed(cfg.seed, rung, rep))
            report = simulate_coupled(run, traj_hat, traj_tilde)
            gaps.append(report.ms_gap_hat)
            gaps_t.append(report.ms_gap_tilde)
            if progress:
                progress(f"M={M} rep={rep} ms_gap={report.ms_gap_hat:.4e}")
        g, se = mean_and_se(gaps)
        gt, set_ = mean_and_se(gaps_t)
        rows.append(ChaosRow(M, delta, g, se, gt, set_))
    return ChaosCurve(rows)


def _atomic_csv(path, header, rows):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    tmp.replace(path)


def write_bin_report_csv(path, report: BinReport) -> None:
    header = ["center", "count", "mean_sq_coef", "target", "std_err", "z", "admitted"]
    _atomic_csv(path, header, ([r[h] for h in header] for r in report.rows()))


def write_chaos_curve_csv(path, curve: ChaosCurve) -> None:
    header = ["M", "delta", "ms_gap", "std_err", "ms_gap_tilde", "std_err_tilde"]
    _atomic_csv(path, header, ([asdict(r)[h] for h in header] for r in curve.rows))


def write_json(path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float), encoding="utf-8")
    tmp.replace(path)
