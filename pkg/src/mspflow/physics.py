"""Fluid properties, permeability media, source fields and the optional
capillary/gravity models.

Saturations handed to property functions are clamped to [0, 1] first; the
bounds checker in :mod:`mspflow.verify` reports pre-clamp violations, the
property evaluation itself never sees out-of-range values.
"""

from dataclasses import dataclass, field

import numpy as np

from .mesh import GridHierarchy

__all__ = [
    "FluidProps",
    "Medium",
    "Sources",
    "CapillaryModel",
    "GravityModel",
    "MediumError",
    "effective_saturation",
    "mobilities",
    "fractional_flow",
    "total_mobility_field",
    "two_point_source",
    "five_point_source",
    "effective_phase_rates",
    "gen_high_contrast",
    "load_medium",
    "save_medium",
]


class MediumError(ValueError):
    """Raised for invalid permeability data (shape or value problems)."""


@dataclass(frozen=True)
class FluidProps:
    """Two-phase fluid parameters; quadratic relative permeabilities by default."""

    mu_w: float = 1.0
    mu_n: float = 5.0
    rho_w: float = 1000.0
    rho_n: float = 800.0
    s_rw: float = 1e-6
    s_rn: float = 1e-6
    porosity: float = 0.5
    kr_exponent: int = 2

    def __post_init__(self):
        for name in ("mu_w", "mu_n", "rho_w", "rho_n", "porosity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.s_rw < 0 or self.s_rn < 0 or self.s_rw + self.s_rn >= 1:
            raise ValueError("residual saturations must satisfy 0 <= s_rw + s_rn < 1")
        if self.porosity > 1:
            raise ValueError("porosity must lie in (0, 1]")
        if self.kr_exponent not in (1, 2):
            raise ValueError("kr_exponent must be 1 or 2")

    def swapped(self) -> "FluidProps":
        """The same fluids with the wetting/non-wetting roles exchanged."""
        return FluidProps(
            mu_w=self.mu_n, mu_n=self.mu_w,
            rho_w=self.rho_n, rho_n=self.rho_w,
            s_rw=self.s_rn, s_rn=self.s_rw,
            porosity=self.porosity, kr_exponent=self.kr_exponent,
        )


@dataclass(frozen=True)
class Medium:
    """Isotropic scalar permeability, one value per fine cell (row-major)."""

    kappa: np.ndarray

    def __post_init__(self):
        kappa = np.ascontiguousarray(np.asarray(self.kappa, dtype=float).ravel())
        if kappa.size == 0 or not np.all(kappa > 0):
            raise MediumError("permeability must be strictly positive everywhere")
        object.__setattr__(self, "kappa", kappa)

    def check_grid(self, grid: GridHierarchy):
        if self.kappa.size != grid.n_cells:
            raise MediumError(
                f"medium has {self.kappa.size} cells, grid has {grid.n_cells}")


@dataclass(frozen=True)
class Sources:
    """Nominal per-fine-cell volume rate densities for each phase."""

    q_w: np.ndarray
    q_n: np.ndarray

    @property
    def q_t(self) -> np.ndarray:
        return self.q_w + self.q_n

    def swapped(self) -> "Sources":
        return Sources(q_w=self.q_n, q_n=self.q_w)


@dataclass(frozen=True)
class CapillaryModel:
    """``off`` (identically zero) or the linear law p_c(S_w) = p_e (1 - S_w)."""

    kind: str = "off"
    entry_pressure: float = 0.0

    def __post_init__(self):
        if self.kind not in ("off", "linear"):
            raise ValueError(f"unknown capillary model {self.kind!r}")
        if self.entry_pressure < 0:
            raise ValueError("entry pressure must be >= 0")

    @property
    def is_off(self) -> bool:
        return self.kind == "off"

    def value(self, s_w: np.ndarray) -> np.ndarray:
        s_w = np.clip(s_w, 0.0, 1.0)
        if self.is_off:
            return np.zeros_like(s_w)
        return self.entry_pressure * (1.0 - s_w)


@dataclass(frozen=True)
class GravityModel:
    """``off`` or gravity with magnitude ``g`` acting along per-cell depth ``z``."""

    kind: str = "off"
    g: float = 0.0
    z: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in ("off", "on"):
            raise ValueError(f"unknown gravity model {self.kind!r}")

    @property
    def is_off(self) -> bool:
        return self.kind == "off"


def effective_saturation(s_w, props: FluidProps):
    """(S_w - S_rw) / (1 - S_rn - S_rw), clamped to [0, 1]."""
    s_w = np.clip(s_w, 0.0, 1.0)
    return np.clip((s_w - props.s_rw) / (1.0 - (props.s_rn + props.s_rw)), 0.0, 1.0)


def mobilities(s_w, props: FluidProps):
    """Phase and total mobilities (lam_w, lam_n, lam_t) at wetting saturation s_w."""
    se = effective_saturation(s_w, props)
    p = props.kr_exponent
    lam_w = se ** p / props.mu_w
    lam_n = (1.0 - se) ** p / props.mu_n
    lam_t = lam_w + lam_n
    if np.any(lam_t <= 0):
        raise ValueError("total mobility vanished; residual saturations inconsistent")
    return lam_w, lam_n, lam_t


def fractional_flow(s_w, props: FluidProps, phase: str = "w"):
    """f_alpha = lam_alpha / lam_t.

    The non-wetting fraction is returned as ``1 - f_w`` so that the pair sums
    to one exactly in floating point.
    """
    lam_w, _, lam_t = mobilities(s_w, props)
    f_w = lam_w / lam_t
    if phase == "w":
        return f_w
    if phase == "n":
        return 1.0 - f_w
    raise ValueError(f"unknown phase {phase!r}")


def total_mobility_field(s_w_field, medium: Medium, props: FluidProps):
    """Per-cell kappa_n = lam_t(S_w) * kappa."""
    _, _, lam_t = mobilities(np.asarray(s_w_field, dtype=float), props)
    return lam_t * medium.kappa


def _corner_cells(grid: GridHierarchy):
    nx, ny = grid.nx, grid.ny
    return (
        grid.cell_id(0, 0),
        grid.cell_id(nx - 1, 0),
        grid.cell_id(0, ny - 1),
        grid.cell_id(nx - 1, ny - 1),
    )


def two_point_source(grid: GridHierarchy, rate: float = 0.2) -> Sources:
    """Injection +rate at the lower-left corner cell, -rate at the opposite corner."""
    q_w = np.zeros(grid.n_cells)
    eta1, _, _, eta4 = _corner_cells(grid)
    q_w[eta1] = rate
    q_w[eta4] = -rate
    return Sources(q_w=q_w, q_n=np.zeros(grid.n_cells))


def five_point_source(grid: GridHierarchy, rate: float = 0.2) -> Sources:
    """Injection +rate at all four corners, -4*rate at the center cell."""
    q_w = np.zeros(grid.n_cells)
    for c in _corner_cells(grid):
        q_w[c] = rate
    center = grid.cell_id((grid.nx - 1) // 2, (grid.ny - 1) // 2)
    q_w[center] = -4.0 * rate
    return Sources(q_w=q_w, q_n=np.zeros(grid.n_cells))


def effective_phase_rates(sources: Sources, s_w_field, props: FluidProps):
    """Per-step phase rates: sinks drain phases in proportion to fractional flow.

    Where the total rate is negative (a producer), the wetting rate is
    f_w(S_w) * q_t and the non-wetting rate is the exact complement
    q_t - q_w; elsewhere the nominal rates are kept.  A sink can then never
    extract a phase that is not present, which is what keeps the explicit
    update inside its bounds for small enough time steps.
    """
    q_t = sources.q_t
    sink = q_t < 0.0
    q_w_eff = sources.q_w.copy()
    if np.any(sink):
        f_w = fractional_flow(np.asarray(s_w_field, dtype=float)[sink], props, "w")
        q_w_eff[sink] = f_w * q_t[sink]
    q_n_eff = q_t - q_w_eff
    return q_w_eff, q_n_eff


def gen_high_contrast(grid: GridHierarchy, contrast: float = 2000.0,
                      pattern: str = "symmetric", seed: int = 0) -> Medium:
    """Synthetic high-contrast medium: background 1, features at ``contrast``.

    Patterns: ``channels`` (meandering high-permeability streaks), ``blobs``
    (elliptic inclusions), ``symmetric`` (both, made centrally symmetric).
    Deterministic for a fixed seed; features are laid out in unit coordinates
    so the same seed yields the same geometry on any resolution.
    """
    if contrast < 1:
        raise MediumError("contrast must be >= 1")
    nx, ny = grid.nx, grid.ny
    mask = np.zeros((ny, nx), dtype=bool)
    rng = np.random.default_rng(seed)
    x = (np.arange(nx) + 0.5) / nx
    y = (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(x, y)

    def add_channels(n):
        for _ in range(n):
            y0 = rng.uniform(0.15, 0.85)
            amp = rng.uniform(0.02, 0.08)
            freq = rng.uniform(1.0, 2.5)
            phase = rng.uniform(0, 2 * np.pi)
            width = rng.uniform(0.008, 0.016)
            horizontal = rng.uniform() < 0.5
            if horizontal:
                path = y0 + amp * np.sin(2 * np.pi * freq * X + phase)
                mask[np.abs(Y - path) < width] = True
            else:
                path = y0 + amp * np.sin(2 * np.pi * freq * Y + phase)
                mask[np.abs(X - path) < width] = True

    def add_blobs(n):
        for _ in range(n):
            cx, cy = rng.uniform(0.1, 0.9, size=2)
            rx = rng.uniform(0.025, 0.06)
            ry = rng.uniform(0.025, 0.06)
            mask[((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 < 1.0] = True

    if pattern == "channels":
        add_channels(5)
    elif pattern == "blobs":
        add_blobs(8)
    elif pattern == "symmetric":
        add_channels(3)
        add_blobs(4)
        mask |= mask[::-1, ::-1]
    else:
        raise MediumError(f"unknown pattern {pattern!r}")

    kappa = np.ones((ny, nx))
    if contrast > 1 and mask.any():
        kappa[mask] = contrast
    return Medium(kappa=kappa.ravel())


def save_medium(medium: Medium, path, nx: int = None, ny: int = None, grid: GridHierarchy = None):
    """Write the text format: first line ``nx ny``, then row-major values (row y=0 first)."""
    if grid is not None:
        nx, ny = grid.nx, grid.ny
    if nx is None or ny is None or nx * ny != medium.kappa.size:
        raise MediumError("nx*ny must match the number of cells")
    with open(path, "w") as f:
        f.write(f"{nx} {ny}\n")
        for j in range(ny):
            row = medium.kappa[j * nx:(j + 1) * nx]
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_medium(path, grid: GridHierarchy = None) -> Medium:
    """Read the text format written by :func:`save_medium` (also fits SPE10 slices)."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2:
            raise MediumError(f"{path}: first line must be 'nx ny'")
        nx, ny = int(header[0]), int(header[1])
        values = np.fromstring(f.read(), sep=" ")
    if values.size != nx * ny:
        raise MediumError(f"{path}: expected {nx * ny} values, found {values.size}")
    if not np.all(values > 0):
        raise MediumError(f"{path}: permeability values must be positive")
    if grid is not None and (nx, ny) != (grid.nx, grid.ny):
        raise MediumError(f"{path}: medium is {nx}x{ny}, grid is {grid.nx}x{grid.ny}")
    return Medium(kappa=values)
