"""Acceptance suite; each test prints one PASS/FAIL line and the terminal summary repeats them.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines as they happen).
"""
import math
import time

import mpmath as mp
import numpy as np
import pytest

from mvlsv.cli import main as cli_main
from mvlsv.fokker_planck import InitialMixture, PdeGrid, fp_solve, mollified_gap
from mvlsv.kernel import KernelSpec
from mvlsv.localvol import CallSurface, VolSurface, black_scholes_call, dupire_local_vol, max_interior_error
from mvlsv.particles import SimConfig, simulate_local_vol, simulate_particles
from mvlsv.regime import (
    RegimeSpec,
    a_matrix,
    b_diag,
    ellipticity_certificate,
    small_range_check,
    verify_certificate,
)
from mvlsv.verify import chaos_curve, leverage_consistency_report, marginal_distance, power_schedule

SIGMA = VolSurface.constant(0.2, horizon=1.0)


def mp_holds(f):
    mp.mp.dps = 40
    f = [mp.mpf(float(v)) for v in f]
    n = len(f)
    worst = max(
        mp.sqrt(sum(f[i] for i in range(n) if i != k) * sum(1 / f[i] for i in range(n) if i != k)) for k in range(n)
    )
    fbar = sum(f) / n
    b = (max(f) - min(f)) / min(f) + mp.sqrt(sum((v - fbar) ** 2 for v in f)) / min(f)
    return min((n + 1 - worst) / 2, 1) > b


def test_criterion_1_condition_and_certificate(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    mismatches, held, worst_margin, failed_certs = 0, 0, math.inf, 0
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        # half the draws come from a narrow band so that the condition holds often enough to matter
        width = rng.choice([1.5, 0.1])
        lo = rng.uniform(0.5, 2.0 - width)
        f = tuple(rng.uniform(lo, lo + width, size=n))
        spec = RegimeSpec(f, 1.0)
        holds = small_range_check(spec).holds
        mismatches += holds != mp_holds(f)
        if holds:
            held += 1
            check = verify_certificate(spec, ellipticity_certificate(spec), 100_000, seed=held)
            worst_margin = min(worst_margin, check.margin)
            failed_certs += not check.passed
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and failed_certs == 0 and held > 0 and elapsed < 60
    record_criterion(
        1, ok, f"holds-flag mismatches={mismatches}/1000, certified={held}, failed={failed_certs}, worst margin={worst_margin:.3e}", elapsed
    )
    assert ok


def test_criterion_2_matrix_identities(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    n, S = 4, 10_000
    worst_colsum, worst_order, unresolved = 0.0, math.inf, 0
    # several f vectors; each carries a batch of (eps, u) pairs along the sample axis
    for block in range(10):
        f = rng.uniform(0.5, 2.0, size=n)
        m = S // 10
        eps = 10.0 ** rng.uniform(-3, 3, size=m)
        c0 = 10.0 ** rng.uniform(-2, 1, size=(n, m))
        c1 = rng.uniform(-1, 1, size=(n, m)) * c0
        c2 = rng.uniform(-1, 1, size=(n, m)) * c0

        def u(x):
            return c0 + c1 * x + c2 * x * x

        def du(x):
            return c1 + 2 * c2 * x

        x0 = 0.1
        A = np.stack([a_matrix(f, e, u(x0)[:, [j]])[..., 0] for j, e in enumerate(eps)], axis=-1)
        colsum = np.abs(A.sum(axis=0) - 1.0)
        worst_colsum = max(worst_colsum, float(colsum.max()))
        exact = np.einsum("nks,ks->ns", A, du(x0))

        def g(x):
            v = u(x)
            return np.stack([b_diag(f, e, v[:, j]) * v[:, j] for j, e in enumerate(eps)], axis=-1)

        hs = 1e-2 / 2.0 ** np.arange(8)
        hs = hs[hs >= 0.99e-4]
        errs = np.array([np.abs((g(x0 + h) - g(x0 - h)) / (2 * h) - exact).max(axis=0) for h in hs])
        # a central difference cannot resolve errors below ~eps_machine * |g| / h; such steps are dropped
        floor = np.finfo(float).eps * np.abs(g(x0)).max(axis=0)[None, :] / hs[:, None]
        usable = errs > 100 * floor
        for j in range(m):
            keep = usable[:, j]
            if keep.sum() < 3:
                unresolved += 1
                continue
            slope = np.polyfit(np.log(hs[keep]), np.log(errs[keep, j]), 1)[0]
            worst_order = min(worst_order, float(slope))
    elapsed = time.perf_counter() - start
    ok = worst_colsum <= 1e-12 and worst_order >= 1.9 and unresolved < S // 100 and elapsed < 60
    record_criterion(2, ok, f"max column-sum deviation={worst_colsum:.2e}, min observed order={worst_order:.3f}, samples at rounding floor={unresolved}", elapsed)
    assert ok


def test_criterion_3_pde_oracle(record_criterion):
    start = time.perf_counter()
    grid = PdeGrid.desk(0.0, 1.0, half_width=6.0, n_x=601, t_step=1e-3)
    mix = InitialMixture((0.5, 0.5), (0.0, 0.0), (0.2, 0.2))
    traj = fp_solve(mix, RegimeSpec((1.0, 1.0), 1.0), SIGMA, grid)
    mean, var = traj.moments(-1)
    masses = traj.masses()
    drift = float(np.abs(masses - masses[0]).max())
    split = float(np.abs(traj.values[:, 0] - traj.values[:, 1]).max())
    elapsed = time.perf_counter() - start
    mean_err, var_err = abs(mean + 0.02), abs(var - 0.08)
    ok = mean_err <= 2e-3 and var_err <= 2e-3 and drift <= 1e-6 and split <= 1e-12 and elapsed < 120
    record_criterion(
        3, ok, f"mean err={mean_err:.2e}, var err={var_err:.2e}, mass drift={drift:.2e}, regime split={split:.2e}", elapsed
    )
    assert ok


@pytest.mark.slow
def test_criterion_4_mollified_gap_trend(record_criterion):
    start = time.perf_counter()
    grid = PdeGrid.desk(0.0, 1.0)
    spec = RegimeSpec((0.8, 1.0), 1.0)
    mix = InitialMixture.uniform(2)
    plain = fp_solve(mix, spec, SIGMA, grid)
    deltas = (0.4, 0.2, 0.1)
    gaps = np.array([mollified_gap(plain, fp_solve(mix, spec, SIGMA, grid, mollify=KernelSpec("gaussian", d))) for d in deltas])
    ratio = gaps / np.array(deltas)
    spread = float(ratio.max() / ratio.min())
    elapsed = time.perf_counter() - start
    ok = bool(np.all(gaps > 0) and np.all(np.diff(gaps) < 0) and spread < 4 and elapsed < 300)
    record_criterion(
        4, ok, f"gaps={np.array2string(gaps, precision=3)}, gap/delta spread=x{spread:.1f} (limit x4)", elapsed
    )
    assert ok


@pytest.mark.slow
def test_criterion_5_calibration_identity(record_criterion):
    start = time.perf_counter()
    M = 100_000
    cfg = SimConfig(RegimeSpec((0.8, 1.0), 0.01), SIGMA, InitialMixture.uniform(2), M, KernelSpec("gaussian", 0.2), 1e-2, 1.0, seed=7)
    snap = simulate_particles(cfg).snapshots[-1]
    report = leverage_consistency_report(snap.X, snap.sq_coef, snap.t, SIGMA)
    bench = simulate_local_vol(SIGMA, cfg.mix, M, cfg.t_step, cfg.T, seed=8)
    ks, call_rmse = marginal_distance(snap.X, bench)
    s0 = math.exp(cfg.mix.mean)
    ks_limit = 1.36 * math.sqrt(2 / M) * 3
    elapsed = time.perf_counter() - start
    ok = report.passed and ks <= ks_limit and call_rmse <= 5e-3 * s0 and elapsed < 600
    record_criterion(
        5,
        ok,
        f"bins within |z|<=3: {report.pass_fraction:.0%}, KS={ks:.4f} (limit {ks_limit:.4f}), call_rmse={call_rmse:.2e}",
        elapsed,
    )
    assert ok


@pytest.mark.slow
def test_criterion_6_chaos_trend(record_criterion):
    start = time.perf_counter()
    ladder = [500, 2000, 8000]
    sched = power_schedule(0.4, 500, 0.125)
    base = SimConfig(RegimeSpec((0.8, 1.0), 1.0), SIGMA, InitialMixture.uniform(2), 500, t_step=1e-2, T=1.0, seed=11)
    curve = chaos_curve(base, ladder, sched, repetitions=5)
    control = chaos_curve(
        SimConfig(RegimeSpec((0.9, 0.9), 1.0), SIGMA, InitialMixture.uniform(2), 500, t_step=1e-2, T=1.0, seed=11), ladder, sched, 5
    )
    zero = bool(np.all(control.column("ms_gap") == 0) and np.all(control.column("ms_gap_tilde") == 0))
    elapsed = time.perf_counter() - start
    ok = curve.non_increasing(0.10) and zero and elapsed < 1200
    record_criterion(
        6, ok, f"ms gap by M={np.array2string(curve.column('ms_gap'), precision=3)}, constant-f control zero={zero}", elapsed
    )
    assert ok


@pytest.mark.slow
def test_criterion_7_determinism_and_backends(record_criterion, tmp_path):
    start = time.perf_counter()
    cfg_path = tmp_path / "sim.yaml"
    cfg_path.write_text(
        "seed: 21\nregime: {f: [0.8, 1.0], epsilon: 1.0}\n"
        "simulation: {M: 10000, T: 1.0, t_step: 0.01, snapshot_times: [0.5, 1.0]}\n"
    )
    blobs = []
    for workers in (1, 8):
        out = tmp_path / f"w{workers}"
        assert cli_main(["simulate", "--config", str(cfg_path), "--out", str(out), "--threads", str(workers)]) == 0
        blobs.append((out / "particles.csv").read_bytes())
    identical = blobs[0] == blobs[1]
    common = dict(spec=RegimeSpec((0.8, 1.0), 1.0), surface=SIGMA, mix=InitialMixture.uniform(2), M=10_000, t_step=1e-2, T=1.0, seed=21)
    naive = simulate_particles(SimConfig(kde_method="naive", **common)).final.X
    binned = simulate_particles(SimConfig(kde_method="binned", **common)).final.X
    gap = float(np.abs(naive - binned).max())
    elapsed = time.perf_counter() - start
    ok = identical and gap <= 1e-6 and elapsed < 300
    record_criterion(7, ok, f"1 vs 8 workers byte-identical={identical}, naive vs binned max gap={gap:.2e}", elapsed)
    assert ok


def test_criterion_8_dupire_round_trip(record_criterion):
    start = time.perf_counter()
    t = np.round(np.arange(0.25, 2.0 + 1e-9, 0.01), 10)
    k = np.round(np.arange(0.7, 1.4 + 1e-9, 0.005), 10)
    calls = CallSurface(t, k, black_scholes_call(1.0, k[None, :], t[:, None], 0.2))
    err = max_interior_error(dupire_local_vol(calls, (0.05, 1.0)), 0.2)
    elapsed = time.perf_counter() - start
    ok = err <= 1e-3 and elapsed < 10
    record_criterion(8, ok, f"max interior |sigma_loc - 0.2|={err:.2e}", elapsed)
    assert ok
