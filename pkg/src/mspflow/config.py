"""Run configuration: schema, defaults mirroring the reference experiments,
TOML loading and validation, and builders for the grid/medium/source objects.
"""

import math
import os
from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .mesh import GridHierarchy
from .physics import (CapillaryModel, FluidProps, GravityModel, Medium,
                      Sources, five_point_source, gen_high_contrast,
                      load_medium, two_point_source)

__all__ = ["ConfigError", "RunConfig", "parse_bases", "bases_label"]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def parse_bases(label: str):
    """Parse an ``"l+k"`` basis label into (offline count, online iterations)."""
    try:
        l, k = label.split("+")
        l, k = int(l), int(k)
    except ValueError as exc:
        raise ConfigError(f"bad basis label {label!r}, expected 'l+k'") from exc
    if l < 1 or k < 0:
        raise ConfigError(f"bad basis label {label!r}: need l >= 1, k >= 0")
    return l, k


def bases_label(offline: int, online: int) -> str:
    return f"{offline}+{online}"


@dataclass
class RunConfig:
    # grid
    nx: int = 100
    ny: int = 100
    block: int = 10
    Lx: float = 1.0
    Ly: float = 1.0
    # time
    dt: float = 100.0
    T: float = 8000.0
    output_every: int = 20          # steps between recorded snapshots
    rebuild_times: tuple = (4000.0,)
    # fluids
    fluids: FluidProps = field(default_factory=FluidProps)
    s_w_init: float = None          # default: s_rw + 1e-6
    # medium
    medium_source: str = "generate"  # "generate" | "file"
    medium_path: str = ""
    contrast: float = 2000.0
    pattern: str = "symmetric"
    seed: int = 0
    # wells
    wells: str = "two_point"        # "two_point" | "five_point"
    rate: float = 0.2
    wells_phase: str = "w"          # which phase the wells inject/produce nominally
    # models
    capillary: CapillaryModel = field(default_factory=CapillaryModel)
    gravity: GravityModel = field(default_factory=GravityModel)
    # multiscale space
    ms_offline: int = 3
    ms_online: int = 0
    ms_tol: float = 0.0             # residual tolerance for enrich_until (0: fixed count)
    ms_layers: int = 3
    ms_full_snapshot: bool = False
    # solver
    solver_tol: float = 1e-12
    gauge: str = "zero-mean"
    halve_on_violation: bool = False
    # output
    output_dir: str = "out"

    def validate(self):
        if self.nx <= 0 or self.ny <= 0 or self.block <= 0:
            raise ConfigError("grid sizes must be positive")
        if self.nx % self.block or self.ny % self.block:
            raise ConfigError("block must divide nx and ny")
        if self.dt <= 0 or self.T < 0:
            raise ConfigError("dt must be positive and T nonnegative")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(f"T={self.T} is not a multiple of dt={self.dt}")
        if self.output_every <= 0:
            raise ConfigError("output_every must be positive")
        if self.wells not in ("two_point", "five_point"):
            raise ConfigError(f"unknown wells kind {self.wells!r}")
        if self.wells_phase not in ("w", "n"):
            raise ConfigError(f"wells_phase must be 'w' or 'n', got {self.wells_phase!r}")
        if self.medium_source not in ("generate", "file"):
            raise ConfigError(f"unknown medium source {self.medium_source!r}")
        if self.medium_source == "file" and not os.path.exists(self.medium_path):
            raise ConfigError(f"medium file {self.medium_path!r} does not exist")
        if self.gauge not in ("zero-mean", "pin-first"):
            raise ConfigError(f"unknown gauge {self.gauge!r}")
        if self.ms_offline < 1 or self.ms_online < 0 or self.ms_layers < 0:
            raise ConfigError("multiscale basis counts must be l >= 1, k >= 0, layers >= 0")
        for t in self.rebuild_times:
            if t <= 0 or t >= self.T:
                continue
            k = t / self.dt
            if abs(k - round(k)) > 1e-9:
                raise ConfigError(f"rebuild time {t} is not a multiple of dt")
        return self

    # -- builders ------------------------------------------------------

    def build_grid(self) -> GridHierarchy:
        return GridHierarchy(self.nx, self.ny, self.block, self.Lx, self.Ly)

    def build_medium(self, grid: GridHierarchy) -> Medium:
        if self.medium_source == "file":
            return load_medium(self.medium_path, grid)
        m = gen_high_contrast(grid, self.contrast, self.pattern, self.seed)
        m.check_grid(grid)
        return m

    def build_sources(self, grid: GridHierarchy) -> Sources:
        if self.wells == "two_point":
            src = two_point_source(grid, self.rate)
        else:
            src = five_point_source(grid, self.rate)
        return src if self.wells_phase == "w" else src.swapped()

    def initial_saturation(self) -> float:
        if self.s_w_init is not None:
            return self.s_w_init
        return self.fluids.s_rw + 1e-6

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def bases(self) -> str:
        return bases_label(self.ms_offline, self.ms_online)

    def swapped(self) -> "RunConfig":
        """Phase-relabeled configuration (wetting <-> non-wetting)."""
        if not self.capillary.is_off or not self.gravity.is_off:
            raise ConfigError("phase swap is only defined with capillary and gravity off")
        init = self.initial_saturation()
        return replace(self, fluids=self.fluids.swapped(), s_w_init=1.0 - init,
                       wells_phase="n" if self.wells_phase == "w" else "w")

    # -- serialization ---------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        grid = d.get("grid", {})
        for k in ("nx", "ny", "block", "Lx", "Ly"):
            if k in grid:
                setattr(cfg, k, grid[k])
        time = d.get("time", {})
        cfg.dt = float(time.get("dt", cfg.dt))
        cfg.T = float(time.get("T", cfg.T))
        cfg.output_every = int(time.get("output_every", cfg.output_every))
        cfg.rebuild_times = tuple(time.get("rebuild_times", cfg.rebuild_times))
        fl = d.get("fluids", {})
        cfg.fluids = FluidProps(
            mu_w=fl.get("mu_w", 1.0), mu_n=fl.get("mu_n", 5.0),
            rho_w=fl.get("rho_w", 1000.0), rho_n=fl.get("rho_n", 800.0),
            s_rw=fl.get("s_rw", 1e-6), s_rn=fl.get("s_rn", 1e-6),
            porosity=fl.get("porosity", 0.2),
            kr_exponent=fl.get("kr_exponent", 2),
        )
        cfg.s_w_init = fl.get("s_w_init", None)
        med = d.get("medium", {})
        cfg.medium_source = med.get("source", cfg.medium_source)
        cfg.medium_path = med.get("path", cfg.medium_path)
        cfg.contrast = float(med.get("contrast", cfg.contrast))
        cfg.pattern = med.get("pattern", cfg.pattern)
        cfg.seed = int(med.get("seed", cfg.seed))
        wells = d.get("wells", {})
        cfg.wells = wells.get("kind", cfg.wells)
        cfg.rate = float(wells.get("rate", cfg.rate))
        cap = d.get("capillary", {})
        cfg.capillary = CapillaryModel(kind=cap.get("model", "off"),
                                       entry_pressure=cap.get("entry_pressure", 0.0))
        grav = d.get("gravity", {})
        if grav.get("model", "off") == "on":
            cfg.gravity = GravityModel(kind="on", g=grav.get("g", 9.8), z=None)
        ms = d.get("ms", {})
        if "bases" in ms:
            cfg.ms_offline, cfg.ms_online = parse_bases(ms["bases"])
        cfg.ms_offline = int(ms.get("offline_bases", cfg.ms_offline))
        cfg.ms_online = int(ms.get("online_iters", cfg.ms_online))
        cfg.ms_tol = float(ms.get("tol", cfg.ms_tol))
        cfg.ms_layers = int(ms.get("oversample_layers", cfg.ms_layers))
        cfg.ms_full_snapshot = bool(ms.get("full_snapshot", cfg.ms_full_snapshot))
        sol = d.get("solver", {})
        cfg.solver_tol = float(sol.get("tol", cfg.solver_tol))
        cfg.gauge = sol.get("gauge", cfg.gauge)
        cfg.halve_on_violation = bool(sol.get("halve_on_violation", False))
        out = d.get("output", {})
        cfg.output_dir = out.get("dir", cfg.output_dir)
        return cfg.validate()

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def _time_is_step(t: float, dt: float) -> bool:
    k = t / dt
    return abs(k - round(k)) <= 1e-9
