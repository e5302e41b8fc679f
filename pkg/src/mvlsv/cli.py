"""``lsv`` command line driver.

    lsv <experiment> --config CONFIG [--out DIR] [--seed INT] [--threads INT]

Exit status is 0 on success, 2 when the configuration is invalid and 1 when a run
fails; in both failure cases an ``error.json`` record is written to the output
directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config
from .errors import LSVError

log = logging.getLogger("mvlsv")


def _write_json(path: Path, payload) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float), encoding="utf-8")
    tmp.replace(path)


def _versions() -> dict:
    import numba
    import scipy

    return {
        "mvlsv": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


# ---------------------------------------------------------------------------
# experiment pipelines; each returns the list of files it wrote


def _check_condition(cfg: ExperimentConfig, out: Path, seed: int, threads: int) -> List[Path]:
    from .regime import small_range_check

    path = out / "condition.json"
    _write_json(path, small_range_check(cfg.regime_spec()).to_dict())
    return [path]


def _certificate(cfg, out, seed, threads):
    from .regime import ellipticity_certificate, small_range_check, verify_certificate

    spec = cfg.regime_spec()
    cert = ellipticity_certificate(spec)
    check = verify_certificate(spec, cert, cfg.certificate.samples, seed)
    path = out / "certificate.json"
    _write_json(path, {"condition": small_range_check(spec).to_dict(), "certificate": cert.to_dict(), "verification": check.to_dict()})
    return [path]


def _dupire(cfg, out, seed, threads):
    from .localvol import write_vol_surface

    surface = cfg.surface()
    csv_path, flags_path = out / "local_vol.csv", out / "dupire_flags.json"
    write_vol_surface(csv_path, surface)
    _write_json(flags_path, {"flags": [{"t": t, "k": k, "reason": r} for t, k, r in surface.flags],
                             "sigma0": surface.sigma0, "sigma1": surface.sigma1,
                             "dsigma_bound": surface.dsigma_bound})
    return [csv_path, flags_path]


def _solve_pde(cfg, out, seed, threads):
    from .fokker_planck import fp_solve, write_diagnostics_json, write_snapshots_csv

    grid = cfg.pde_grid()
    mollify = cfg.kernel_spec() if cfg.solve_pde.mollify else None
    traj = fp_solve(cfg.mixture_obj(), cfg.regime_spec(), cfg.surface(), grid, mollify,
                    (cfg.picard.max_iters, cfg.picard.tol))
    times = cfg.solve_pde.snapshot_times or [0.0, grid.horizon]
    csv_path, diag_path = out / "density.csv", out / "pde_diagnostics.json"
    write_snapshots_csv(csv_path, traj, times)
    write_diagnostics_json(diag_path, traj)
    return [csv_path, diag_path]


def _simulate(cfg, out, seed, threads):
    from .particles import simulate_particles, write_snapshots_csv

    res = simulate_particles(cfg.sim_config(seed, threads))
    csv_path, stats_path = out / "particles.csv", out / "coef_stats.json"
    write_snapshots_csv(csv_path, res.snapshots)
    _write_json(stats_path, res.coef_stats)
    return [csv_path, stats_path]


def _calibration_report(cfg, out, seed, threads):
    from dataclasses import replace

    from .particles import simulate_local_vol, simulate_particles
    from .verify import leverage_consistency_report, marginal_distance, write_bin_report_csv

    sim = cfg.sim_config(seed, threads)
    sim = replace(sim, snapshot_times=(sim.T,))
    res = simulate_particles(sim)
    snap = res.snapshots[-1]
    report = leverage_consistency_report(snap.X, snap.sq_coef, snap.t, sim.surface, cfg.calibration.n_bins)
    bench = simulate_local_vol(sim.surface, sim.mix, sim.M, sim.t_step, sim.T, seed + cfg.calibration.benchmark_seed_offset)
    ks, call_rmse = marginal_distance(snap.X, bench)
    bins_path, summary_path = out / "bins.csv", out / "calibration.json"
    write_bin_report_csv(bins_path, report)
    _write_json(summary_path, {**report.summary(), "ks_statistic": ks, "call_rmse": call_rmse, "M": sim.M, "t": snap.t})
    return [bins_path, summary_path]


def _chaos_study(cfg, out, seed, threads):
    from .verify import chaos_curve, power_schedule, write_chaos_curve_csv

    sched = cfg.chaos.delta_schedule
    base = cfg.sim_config(seed, threads)
    curve = chaos_curve(base, cfg.chaos.M_ladder, power_schedule(sched.delta0, sched.m0, sched.exponent),
                        cfg.chaos.repetitions, cfg.pde_grid(), progress=log.info)
    csv_path, summary_path = out / "chaos.csv", out / "chaos.json"
    write_chaos_curve_csv(csv_path, curve)
    _write_json(summary_path, {"non_increasing_within_10pct": curve.non_increasing(0.10),
                               "M_ladder": [r.M for r in curve.rows]})
    return [csv_path, summary_path]


PIPELINES = {
    "check-condition": _check_condition,
    "certificate": _certificate,
    "dupire": _dupire,
    "solve-pde": _solve_pde,
    "simulate": _simulate,
    "calibration-report": _calibration_report,
    "chaos-study": _chaos_study,
}


def run(cfg: ExperimentConfig, kind: str, out: Path, seed: Optional[int] = None, threads: int = 1) -> int:
    """Dispatch one experiment and write its manifest; returns the process exit status."""
    seed = cfg.seed if seed is None else seed
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        files = PIPELINES[kind](cfg, out, seed, threads)
    except LSVError as exc:
        _write_json(out / "error.json", {"status": 1, "error": type(exc).__name__, "message": str(exc)})
        log.error("%s failed: %s", kind, exc)
        return 1
    manifest = {
        "experiment": kind,
        "config_sha256": cfg.digest(),
        "seed": seed,
        "threads": threads,
        "versions": _versions(),
        "wall_clock_seconds": time.perf_counter() - start,
        "outputs": [p.name for p in files],
    }
    _write_json(out / "manifest.json", manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsv", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment)
    except ConfigError as exc:
        out = args.out or Path("out")
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "error.json", {"status": 2, "error": "ConfigError", "errors": exc.errors})
        print(str(exc), file=sys.stderr)
        return 2
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    out = args.out or cfg.resolve(cfg.output_dir)
    return run(cfg, args.experiment, out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
