"""Regularized McKean-Vlasov local stochastic volatility engine."""

__version__ = "0.1.0"

from .errors import CertificateUnavailable, LSVError, NumericalError, PicardWarning, ValidationError
from .fokker_planck import GridDensity, InitialMixture, PdeGrid, density_at, fp_solve, fp_step, init_density, mollified_gap
from .kernel import KernelSpec, grid_convolve, kde, mollifier_eval
from .localvol import CallSurface, VolSurface, dupire_local_vol, vol_eval
from .particles import (
    ParticleEnsemble,
    SimConfig,
    ratio_coefficient,
    sample_initial,
    simulate_coupled,
    simulate_local_vol,
    simulate_particles,
)
from .regime import (
    RegimeSpec,
    coefficient_matrices,
    ellipticity_certificate,
    small_range_check,
    verify_certificate,
)
from .verify import chaos_curve, leverage_consistency_report, marginal_distance
