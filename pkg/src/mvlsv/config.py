"""YAML experiment configuration with strict validation.

Unknown keys are rejected and every problem is collected before reporting, so a
single run of ``load_config`` lists all mistakes in a file.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator
from pydantic import ValidationError as PydanticError

from .errors import LSVError, ValidationError
from .fokker_planck import InitialMixture, PdeGrid
from .kernel import KernelSpec
from .localvol import VolSurface, dupire_local_vol, read_call_surface, read_vol_surface
from .particles import SimConfig
from .regime import RegimeSpec

EXPERIMENTS = (
    "check-condition",
    "certificate",
    "dupire",
    "solve-pde",
    "simulate",
    "calibration-report",
    "chaos-study",
)


class ConfigError(ValidationError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RegimeSection(_Strict):
    f: List[PositiveFloat] = Field(min_length=2)
    epsilon: PositiveFloat = 1.0


class KernelSection(_Strict):
    family: Literal["gaussian", "quartic"] = "gaussian"
    delta: PositiveFloat = 0.2
    truncation_radius: PositiveFloat = 8.0


class VolSection(_Strict):
    kind: Literal["constant", "call_surface", "vol_surface"] = "constant"
    sigma: Optional[PositiveFloat] = 0.2
    path: Optional[str] = None
    sigma0: Optional[PositiveFloat] = None
    sigma1: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def _needs_path(self):
        if self.kind != "constant" and not self.path:
            raise ValueError(f"vol.path is required when vol.kind is {self.kind!r}")
        if self.kind != "constant" and (self.sigma0 is None or self.sigma1 is None):
            raise ValueError("vol.sigma0 and vol.sigma1 are required for surface inputs")
        return self


class MixtureSection(_Strict):
    weights: List[float]
    means: List[float]
    stds: List[PositiveFloat]


class GridSection(_Strict):
    half_width: PositiveFloat = 6.0
    n_x: int = Field(default=601, ge=16)
    t_step: PositiveFloat = 1e-3


class PicardSection(_Strict):
    max_iters: PositiveInt = 5
    tol: PositiveFloat = 1e-10


class SimulationSection(_Strict):
    M: int = Field(default=10_000, ge=2)
    t_step: PositiveFloat = 1e-2
    T: PositiveFloat = 1.0
    kde_method: Literal["naive", "binned"] = "binned"
    snapshot_times: List[float] = Field(default_factory=list)


class CertificateSection(_Strict):
    samples: PositiveInt = 100_000


class SolvePdeSection(_Strict):
    mollify: bool = False
    snapshot_times: List[float] = Field(default_factory=list)


class CalibrationSection(_Strict):
    n_bins: PositiveInt = 20
    benchmark_seed_offset: int = 1


class ScheduleSection(_Strict):
    delta0: PositiveFloat = 0.4
    m0: PositiveInt = 500
    exponent: PositiveFloat = 0.125


class ChaosSection(_Strict):
    M_ladder: List[PositiveInt] = Field(default_factory=lambda: [500, 2000, 8000])
    repetitions: int = Field(default=5, ge=3)
    delta_schedule: ScheduleSection = Field(default_factory=ScheduleSection)


class DupireSection(_Strict):
    snapshot: bool = True


class ExperimentConfig(_Strict):
    experiment: Optional[Literal[EXPERIMENTS]] = None  # type: ignore[valid-type]
    seed: int = 0
    output_dir: str = "out"
    regime: RegimeSection
    kernel: KernelSection = Field(default_factory=KernelSection)
    vol: VolSection = Field(default_factory=VolSection)
    mixture: Optional[MixtureSection] = None
    grid: GridSection = Field(default_factory=GridSection)
    picard: PicardSection = Field(default_factory=PicardSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    certificate: CertificateSection = Field(default_factory=CertificateSection)
    solve_pde: SolvePdeSection = Field(default_factory=SolvePdeSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    chaos: ChaosSection = Field(default_factory=ChaosSection)
    dupire: DupireSection = Field(default_factory=DupireSection)

    base_dir: str = Field(default=".", exclude=True)

    # -- domain objects -------------------------------------------------

    def regime_spec(self) -> RegimeSpec:
        return RegimeSpec(tuple(self.regime.f), self.regime.epsilon)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel.family, self.kernel.delta, self.kernel.truncation_radius)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def surface(self) -> VolSurface:
        v = self.vol
        if v.kind == "constant":
            return VolSurface.constant(v.sigma, max(self.simulation.T, 1.0), v.sigma0, v.sigma1)
        if v.kind == "vol_surface":
            return read_vol_surface(self.resolve(v.path), v.sigma0, v.sigma1)
        return dupire_local_vol(read_call_surface(self.resolve(v.path)), (v.sigma0, v.sigma1))

    def mixture_obj(self) -> InitialMixture:
        if self.mixture is None:
            return InitialMixture.uniform(len(self.regime.f))
        m = self.mixture
        return InitialMixture(tuple(m.weights), tuple(m.means), tuple(m.stds))

    def pde_grid(self) -> PdeGrid:
        g = self.grid
        return PdeGrid.desk(self.mixture_obj().mean, self.simulation.T, g.half_width, g.n_x, g.t_step)

    def sim_config(self, seed: Optional[int] = None, threads: int = 1) -> SimConfig:
        s = self.simulation
        return SimConfig(
            spec=self.regime_spec(),
            surface=self.surface(),
            mix=self.mixture_obj(),
            M=s.M,
            kernel=self.kernel_spec(),
            t_step=s.t_step,
            T=s.T,
            seed=self.seed if seed is None else seed,
            kde_method=s.kde_method,
            snapshot_times=tuple(s.snapshot_times),
            threads=threads,
        )

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _semantic_errors(cfg: ExperimentConfig, kind: Optional[str]) -> List[str]:
    errors = []
    if kind and cfg.experiment and cfg.experiment != kind:
        errors.append(f"experiment: config says {cfg.experiment!r} but subcommand is {kind!r}")
    kind = kind or cfg.experiment
    if cfg.vol.kind != "constant" and not cfg.resolve(cfg.vol.path).is_file():
        errors.append(f"vol.path: file not found: {cfg.vol.path}")
    if kind == "dupire" and cfg.vol.kind != "call_surface":
        errors.append("vol.kind: the dupire experiment needs a call_surface input")
    if cfg.mixture is not None and len(cfg.mixture.weights) != len(cfg.regime.f):
        errors.append(f"mixture.weights: {len(cfg.mixture.weights)} entries for {len(cfg.regime.f)} regimes")
    if cfg.chaos.M_ladder != sorted(set(cfg.chaos.M_ladder)):
        errors.append("chaos.M_ladder: must be strictly increasing")
    builders = [("regime", cfg.regime_spec), ("kernel", cfg.kernel_spec), ("mixture", cfg.mixture_obj)]
    if not errors:
        builders += [("vol", cfg.surface), ("grid", cfg.pde_grid)]
        if kind in ("simulate", "calibration-report", "chaos-study"):
            builders.append(("simulation", cfg.sim_config))
    for name, build in builders:
        try:
            obj = build()
        except (LSVError, OSError, ValueError) as exc:
            errors.append(f"{name}: {exc}")
            continue
        if name == "grid" and kind in ("solve-pde", "chaos-study"):
            from .fokker_planck import init_density

            try:
                init_density(cfg.mixture_obj(), obj)
            except LSVError as exc:
                errors.append(f"grid: {exc}")
    return errors


def load_config(path, kind: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate a YAML config; raises ConfigError listing every problem found."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([f"parse error: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["top level of the config must be a mapping"])
    if "base_dir" in raw:
        raise ConfigError(["base_dir: reserved key"])
    try:
        cfg = ExperimentConfig(**raw, base_dir=str(path.parent))
    except PydanticError as exc:
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            if err["type"] == "extra_forbidden":
                msgs.append(f"{loc}: unknown key")
            else:
                msgs.append(f"{loc}: {err['msg']}")
        raise ConfigError(msgs) from None
    errors = _semantic_errors(cfg, kind)
    if errors:
        raise ConfigError(errors)
    return cfg
