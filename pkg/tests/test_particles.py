import math

import numpy as np
import pytest

from mvlsv import rng
from mvlsv.errors import ValidationError
from mvlsv.fokker_planck import InitialMixture, PdeGrid, fp_solve
from mvlsv.kernel import KernelSpec, mollifier_eval
from mvlsv.localvol import VolSurface
from mvlsv.particles import (
    SimConfig,
    ratio_coefficient,
    sample_initial,
    simulate_coupled,
    simulate_local_vol,
    simulate_particles,
    write_snapshots_csv,
)
from mvlsv.regime import RegimeSpec

SIGMA = VolSurface.constant(0.2, horizon=1.0)


def config(**kw):
    base = dict(spec=RegimeSpec((0.8, 1.0), 1.0), surface=SIGMA, mix=InitialMixture.uniform(2), M=500, t_step=0.05, T=0.5, seed=3)
    base.update(kw)
    return SimConfig(**base)


def test_counter_streams_are_addressable():
    a = rng.normal_block(1, rng.PARTICLE_NOISE, 7, 10)
    b = rng.normal_block(1, rng.PARTICLE_NOISE, 7, 1000)
    np.testing.assert_array_equal(a, b[:10])
    assert not np.array_equal(a, rng.normal_block(1, rng.PARTICLE_NOISE, 8, 10))
    assert not np.array_equal(a, rng.normal_block(1, rng.LOCALVOL_NOISE, 7, 10))
    assert rng.child_seed(5, 1, 2) == rng.child_seed(5, 1, 2) != rng.child_seed(5, 2, 1)


def test_sample_initial_single_regime():
    ens = sample_initial(InitialMixture((1.0, 0.0), (0, 0), (1, 1)), 1000, 0)
    assert np.all(ens.Y == 0)


def test_sample_initial_fractions_and_determinism():
    M = 100_000
    ens = sample_initial(InitialMixture.uniform(2), M, 11)
    assert abs(np.mean(ens.Y == 0) - 0.5) <= 3 * math.sqrt(0.25 / M)
    again = sample_initial(InitialMixture.uniform(2), M, 11)
    np.testing.assert_array_equal(ens.X, again.X)
    np.testing.assert_array_equal(ens.Y, again.Y)


def test_ratio_coefficient_arithmetic():
    spec = RegimeSpec((1.0, 2.0), 1.0)
    assert ratio_coefficient(0.0, 1, (1.0, 1.5), spec) == pytest.approx(1.2)
    assert ratio_coefficient(0.0, 0, (0.0, 0.0), spec) == 1.0
    const = RegimeSpec((1.5, 1.5), 0.3)
    assert ratio_coefficient(0.0, 1, (2.0, 3.0), const) == pytest.approx(1.0)


def test_two_particle_step_by_hand():
    spec = RegimeSpec((1.0, 2.0), 0.5)
    kern = KernelSpec("gaussian", 0.3)
    cfg = SimConfig(spec, SIGMA, InitialMixture.uniform(2), M=2, kernel=kern, t_step=0.1, T=0.1, seed=42, kde_method="naive")
    ens = sample_initial(cfg.mix, 2, 42)
    ens.X[:] = [0.0, 0.1]
    ens.Y[:] = [0, 1]
    res = simulate_particles(cfg, ens)
    f = [1.0, 2.0]
    W = lambda d: math.exp(-0.5 * (d / 0.3) ** 2) / (0.3 * math.sqrt(2 * math.pi))
    noise = rng.normal_block(42, rng.PARTICLE_NOISE, 0, 2)
    for i, x in enumerate((0.0, 0.1)):
        plain = (W(x - 0.0) + W(x - 0.1)) / 2
        weighted = (f[0] * W(x - 0.0) + f[1] * W(x - 0.1)) / 2
        r = (0.5 + f[i] * plain) / (0.5 + weighted)
        expected = x - 0.5 * r * 0.04 * 0.1 + math.sqrt(r) * 0.2 * math.sqrt(0.1) * noise[i]
        assert res.final.X[i] == pytest.approx(expected, abs=1e-14)


def test_constant_f_drift_and_unit_ratio():
    M = 20_000
    cfg = config(spec=RegimeSpec((1.1, 1.1), 0.01), M=M, T=1.0, t_step=0.05)
    res = simulate_particles(cfg)
    assert res.coef_stats["R_min"] == res.coef_stats["R_max"] == 1.0
    x0 = sample_initial(cfg.mix, M, cfg.seed).X
    assert abs(np.mean(res.final.X - x0) + 0.02) <= 3 * 0.2 / math.sqrt(M)


def test_huge_epsilon_matches_constant_run():
    base = config(M=300, spec=RegimeSpec((0.5, 2.0), 1e8))
    const = config(M=300, spec=RegimeSpec((1.0, 1.0), 1e8))
    a, b = simulate_particles(base), simulate_particles(const)
    assert max(abs(a.coef_stats["R_min"] - 1), abs(a.coef_stats["R_max"] - 1)) <= 1e-6
    assert np.abs(a.final.X - b.final.X).max() <= 1e-6


def test_coefficient_bounds():
    spec = RegimeSpec((0.8, 1.0), 0.01)
    res = simulate_particles(config(spec=spec))
    lo, hi = spec.f_min / spec.f_max, spec.f_max / spec.f_min
    assert lo - 1e-12 <= res.coef_stats["R_min"] <= res.coef_stats["R_max"] <= hi + 1e-12


def test_exchangeability_under_relabelling():
    cfg = config(M=300)
    ens = sample_initial(cfg.mix, cfg.M, cfg.seed)
    perm = np.random.default_rng(0).permutation(cfg.M)
    a = simulate_particles(cfg, ens)
    b = simulate_particles(cfg, ens.permuted(perm))
    np.testing.assert_array_equal(a.final.X[perm], b.final.X)


def test_determinism_and_threads():
    a = simulate_particles(config(threads=1))
    b = simulate_particles(config(threads=4))
    np.testing.assert_array_equal(a.final.X, b.final.X)


def test_naive_and_binned_agree():
    a = simulate_particles(config(kde_method="naive"))
    b = simulate_particles(config(kde_method="binned"))
    assert np.abs(a.final.X - b.final.X).max() <= 1e-6


def test_snapshots_and_csv(tmp_path):
    res = simulate_particles(config(M=10, snapshot_times=(0.0, 0.25, 0.5)))
    assert [s.t for s in res.snapshots] == pytest.approx([0.0, 0.25, 0.5])
    write_snapshots_csv(tmp_path / "p.csv", res.snapshots)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "time,particle,regime,x" and len(lines) == 31


@pytest.mark.parametrize(
    "kw", [dict(M=1), dict(t_step=0.0), dict(T=0.33, t_step=0.1), dict(kde_method="fft"), dict(T=2.0), dict(snapshot_times=(0.7,))]
)
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        config(**kw)


def test_coupled_constant_f_gives_zero_gaps():
    spec = RegimeSpec((1.0, 1.0), 1.0)
    cfg = config(spec=spec, M=200)
    grid = PdeGrid.desk(0.0, cfg.T, 4.0, 161, 1e-2)
    hat = fp_solve(cfg.mix, spec, SIGMA, grid)
    tilde = fp_solve(cfg.mix, spec, SIGMA, grid, mollify=cfg.kernel)
    rep = simulate_coupled(cfg, hat, tilde)
    assert rep.ms_gap_hat == rep.ms_gap_tilde == rep.ms_gap_tilde_hat == 0.0


def test_coupled_is_deterministic_and_small():
    cfg = config(M=400)
    grid = PdeGrid.desk(0.0, cfg.T, 4.0, 161, 1e-2)
    hat = fp_solve(cfg.mix, cfg.spec, SIGMA, grid)
    tilde = fp_solve(cfg.mix, cfg.spec, SIGMA, grid, mollify=cfg.kernel)
    a, b = simulate_coupled(cfg, hat, tilde), simulate_coupled(cfg, hat, tilde)
    assert a.to_dict() == b.to_dict()
    assert 0 < a.ms_gap_hat < 1e-3


def test_coupled_rejects_short_trajectory():
    cfg = config(M=50)
    short = fp_solve(cfg.mix, cfg.spec, SIGMA, PdeGrid.desk(0.0, 0.2, 4.0, 161, 1e-2))
    with pytest.raises(ValidationError):
        simulate_coupled(cfg, short, short)


def test_local_vol_gaussian_law():
    M = 40_000
    mix = InitialMixture((1.0,), (0.1,), (0.05,))
    x = simulate_local_vol(SIGMA, mix, M, 0.05, 1.0, 4)
    mean, var = x.mean(), x.var(ddof=1)
    assert abs(mean - (0.1 - 0.02)) <= 3 * math.sqrt((0.04 + 0.0025) / M)
    v = 0.04 + 0.0025
    assert abs(var - v) <= 3 * v * math.sqrt(2 / (M - 1))
    np.testing.assert_array_equal(x, simulate_local_vol(SIGMA, mix, M, 0.05, 1.0, 4))


def test_local_vol_zero_horizon_returns_initial():
    mix = InitialMixture.uniform(2)
    x0 = simulate_local_vol(SIGMA, mix, 100, 0.1, 0.0, 2)
    from mvlsv.particles import sample_marginal

    np.testing.assert_array_equal(x0, sample_marginal(mix, 100, 2))
