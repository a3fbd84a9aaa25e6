"""Fine-scale reference solver: the three-step implicit-pressure /
explicit-saturation loop with total and capillary-driven velocities.

Per time step:

1. capillary flux: solve the velocity mass system for xi_c (identically
   zero when capillary and gravity are off);
2. pressure/velocity: solve the saddle system for the total flux u_t and
   wetting pressure, then p_n = p_w + p_c cellwise;
3. saturation: explicit upwind update of S_w on the fine cells,
   S_n = 1 - S_w.

The non-wetting saturation is also advanced by its own direct update so
the equivalence of the two routes is observable in every run.
"""

import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import fineops, linalg
from .config import RunConfig
from .fineops import DofLayout, MobilityOps, StaticOps
from .mesh import GridHierarchy
from .physics import (CapillaryModel, FluidProps, GravityModel, Medium,
                      Sources, effective_phase_rates, fractional_flow)

__all__ = [
    "State", "TimeGrid", "FineProblem", "Trajectory",
    "step_capillary", "step_pressure_velocity", "step_saturation",
    "phase_velocities", "cfl_dt", "run_fine",
]


@dataclass
class State:
    """Time-stamped solution fields; saturations per cell, fluxes per edge."""

    t: float
    s_w: np.ndarray
    s_n: np.ndarray
    p_w: np.ndarray
    p_n: np.ndarray
    u_t: np.ndarray
    xi_c: np.ndarray


@dataclass
class TimeGrid:
    dt: float
    T: float
    output_every: int = 1
    rebuild_times: tuple = ()

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"T={self.T} is not a multiple of dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def is_output(self, step: int) -> bool:
        return step % self.output_every == 0 or step == self.n_steps

    def rebuild_steps(self):
        out = set()
        for t in self.rebuild_times:
            if 0 < t < self.T:
                out.add(int(round(t / self.dt)))
        return out


class FineProblem:
    """Grid, medium, fluids and static operators bundled for the time loop."""

    def __init__(self, grid: GridHierarchy, medium: Medium, props: FluidProps,
                 sources: Sources, capillary: CapillaryModel = CapillaryModel(),
                 gravity: GravityModel = GravityModel(), tol: float = 1e-12,
                 gauge: str = "zero-mean"):
        medium.check_grid(grid)
        self.grid = grid
        self.medium = medium
        self.props = props
        self.sources = sources
        self.capillary = capillary
        self.gravity = gravity
        self.tol = tol
        self.gauge = gauge
        self.layout = DofLayout.no_flow(grid)
        self.static = fineops.assemble_static(grid, sources, self.layout)
        self.interior = self.layout.interior_edges

    @property
    def models_off(self) -> bool:
        return self.capillary.is_off and self.gravity.is_off

    def mobility(self, s_w: np.ndarray) -> MobilityOps:
        return fineops.assemble_mobility(self.grid, self.medium, self.props, s_w,
                                         self.capillary, self.gravity, self.static)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "FineProblem":
        grid = cfg.build_grid()
        return cls(grid, cfg.build_medium(grid), cfg.fluids, cfg.build_sources(grid),
                   cfg.capillary, cfg.gravity, cfg.solver_tol, cfg.gauge)


def step_capillary(prob: FineProblem, mob: MobilityOps, s_w: np.ndarray) -> np.ndarray:
    """Capillary-driven flux xi_c at the new time level (full edge vector)."""
    grid = prob.grid
    if prob.models_off:
        return np.zeros(grid.n_edges)
    rhs = prob.static.C @ mob.P_c_vec
    if not prob.gravity.is_off:
        rhs = rhs - (prob.props.rho_n - prob.props.rho_w) * mob.E_vec
    ii = prob.interior
    A_ii = mob.A[ii][:, ii]
    xi_int = linalg.solve_spd(A_ii, rhs[ii], prob.tol)
    return prob.layout.expand(xi_int)


def _bt_edge_fraction(prob: FineProblem, s_w: np.ndarray, u_prev, xi_prev):
    """Per-edge f_w + f_n for the implicit constraint row.

    Exactly one with capillary and gravity off (B_t == C^T); otherwise the
    upwind directions come from the previous step's fluxes.
    """
    if prob.models_off:
        return None
    choice = fineops.upwind_directions(prob.grid, u_prev, xi_prev, s_w,
                                       prob.props, capillary_active=True)
    fw, fn, _, _ = fineops.upwind_fractions(s_w, choice, prob.props)
    return fw + fn


def step_pressure_velocity(prob: FineProblem, mob: MobilityOps, xi_c: np.ndarray,
                           s_w: np.ndarray, u_prev=None, xi_prev=None):
    """Solve the total-velocity/pressure saddle system; returns (u_t, p_w, p_n)."""
    grid = prob.grid
    ii = prob.interior
    st = prob.static
    rhs_u = np.zeros(grid.n_edges)
    if not prob.models_off:
        rhs_u = mob.A_n @ xi_c
    if not prob.gravity.is_off:
        rhs_u = rhs_u - prob.props.rho_w * mob.E_vec
    A_ii = mob.A[ii][:, ii]
    ft = _bt_edge_fraction(prob, s_w, u_prev, xi_prev)
    if ft is None:
        Brow = st.Dmat[:, ii]
        C_blk = None
        bands = fineops.interior_bands(grid, mob.A)
    else:
        import scipy.sparse as sp
        Brow = (st.Dmat @ sp.diags(ft))[:, ii]
        C_blk = st.C[ii, :]
        bands = None
    sys = linalg.SaddleSystem(A=A_ii, B=Brow, f=rhs_u[ii], g=st.F_t,
                              C=C_blk, bands=bands, gauge=prob.gauge)
    u_int, p_w = linalg.solve_saddle(sys, prob.tol)
    u_t = prob.layout.expand(u_int)
    p_n = p_w + mob.P_c_vec
    return u_t, p_w, p_n


def step_saturation(prob: FineProblem, s_w: np.ndarray, s_n: np.ndarray,
                    u_t: np.ndarray, xi_c: np.ndarray, dt: float):
    """Explicit upwind transport update; returns the new saturations and the
    pieces needed for conservation bookkeeping."""
    grid, props = prob.grid, prob.props
    st = prob.static
    choice = fineops.upwind_directions(grid, u_t, xi_c, s_w, props,
                                       capillary_active=not prob.models_off)
    fw_e, fn_e, g_w, g_n = fineops.upwind_fractions(s_w, choice, props)
    flux_w, flux_n = fineops.phase_edge_fluxes(u_t, xi_c, fw_e, g_w)
    q_w_eff, q_n_eff = effective_phase_rates(prob.sources, s_w, props)
    zeta = props.porosity
    h2 = grid.h ** 2
    s_w_next = s_w + (dt / zeta) * (q_w_eff * h2 - st.Dmat @ flux_w) / st.P_diag
    s_n_next = 1.0 - s_w_next
    s_n_direct_inc = (dt / zeta) * (q_n_eff * h2 - st.Dmat @ flux_n) / st.P_diag
    aux = {
        "choice": choice, "flux_w": flux_w, "flux_n": flux_n,
        "q_w_eff": q_w_eff, "q_n_eff": q_n_eff,
        "s_n_direct_inc": s_n_direct_inc,
    }
    return s_w_next, s_n_next, aux


def phase_velocities(s_w: np.ndarray, u_t: np.ndarray, xi_c: np.ndarray,
                     prob: FineProblem):
    """Phase edge fluxes u_w = f_w u_t - f_w f_n xi_c and the exact complement."""
    choice = fineops.upwind_directions(prob.grid, u_t, xi_c, s_w, prob.props,
                                       capillary_active=not prob.models_off)
    fw_e, _, g_w, _ = fineops.upwind_fractions(s_w, choice, prob.props)
    return fineops.phase_edge_fluxes(u_t, xi_c, fw_e, g_w)


def cfl_dt(u_t: np.ndarray, xi_c: np.ndarray, props: FluidProps,
           grid: GridHierarchy, safety: float = 0.5) -> float:
    """Time-step suggestion safety * porosity * h / max(|u_t.n| + |xi_c.n|)."""
    m = np.abs(u_t) + (np.abs(xi_c) if xi_c is not None else 0.0)
    peak = float(np.max(m)) if m.size else 0.0
    if peak == 0.0:
        return np.inf
    return safety * props.porosity * grid.h / peak


@dataclass
class Trajectory:
    """Recorded run data: snapshots at output times plus per-step monitors."""

    times: list = field(default_factory=list)
    s_w: list = field(default_factory=list)
    s_n: list = field(default_factory=list)
    s_w_prev: list = field(default_factory=list)   # state one step before output
    u_t: list = field(default_factory=list)        # flux advancing into output state
    xi_c: list = field(default_factory=list)
    p_w: list = field(default_factory=list)
    dual_max: list = field(default_factory=list)   # |S_n direct - (1 - S_w)|
    stab_ratio: list = field(default_factory=list)
    bounds_min: list = field(default_factory=list)  # per step, whole run
    bounds_max: list = field(default_factory=list)
    cfl_suggestion: float = np.inf
    enrichment_history: list = field(default_factory=list)
    rebuild_steps: list = field(default_factory=list)
    halved_steps: list = field(default_factory=list)
    wall_time: float = 0.0

    def index_at(self, t: float) -> int:
        for i, ti in enumerate(self.times):
            if abs(ti - t) <= 1e-9 * max(1.0, abs(t)):
                return i
        raise KeyError(f"no snapshot at t={t}; have {self.times}")


def _stability_ratio(mob: MobilityOps, u_t, F_t, h2):
    qnorm = np.linalg.norm(F_t / h2) * np.sqrt(h2)
    if qnorm == 0:
        return np.inf
    energy = float(u_t @ (mob.A @ u_t))
    return np.sqrt(max(energy, 0.0)) / qnorm


def _advance(prob: FineProblem, s_w, s_n, s_n_direct, u_prev, xi_prev, dt,
             halve: bool = False, depth: int = 0):
    """One time increment of size dt, optionally split when bounds break."""
    mob = prob.mobility(s_w)
    xi = step_capillary(prob, mob, s_w)
    u, p_w, p_n = step_pressure_velocity(prob, mob, xi, s_w,
                                         u_prev=u_prev, xi_prev=xi_prev)
    s_w_new, s_n_new, aux = step_saturation(prob, s_w, s_n, u, xi, dt)
    violated = s_w_new.min() < -1e-12 or s_w_new.max() > 1.0 + 1e-12
    if violated and halve and depth < 8:
        out = _advance(prob, s_w, s_n, s_n_direct, u_prev, xi_prev, dt / 2,
                       halve, depth + 1)
        out2 = _advance(prob, out["s_w"], out["s_n"], out["s_n_direct"],
                        out["u_t"], out["xi_c"], dt / 2, halve, depth + 1)
        out2["halved"] = True
        out2["bounds_min"] = min(out["bounds_min"], out2["bounds_min"])
        out2["bounds_max"] = max(out["bounds_max"], out2["bounds_max"])
        return out2
    return {
        "s_w": s_w_new, "s_n": s_n_new,
        "s_n_direct": s_n_direct + aux["s_n_direct_inc"],
        "u_t": u, "xi_c": xi, "p_w": p_w, "p_n": p_n, "mob": mob,
        "bounds_min": float(s_w_new.min()), "bounds_max": float(s_w_new.max()),
        "halved": False,
    }


def run_fine(cfg: RunConfig, prob: FineProblem = None) -> Trajectory:
    """Run the fine-scale scheme from t=0 to T; records snapshots and monitors."""
    cfg.validate()
    t0 = _time.perf_counter()
    if prob is None:
        prob = FineProblem.from_config(cfg)
    grid = prob.grid
    tg = TimeGrid(cfg.dt, cfg.T, cfg.output_every, cfg.rebuild_times)

    s_w = np.full(grid.n_cells, cfg.initial_saturation())
    s_n = 1.0 - s_w
    s_n_direct = s_n.copy()
    u_t = np.zeros(grid.n_edges)
    xi_c = np.zeros(grid.n_edges)

    traj = Trajectory()
    traj.times.append(0.0)
    traj.s_w.append(s_w.copy())
    traj.s_n.append(s_n.copy())
    traj.s_w_prev.append(s_w.copy())
    traj.u_t.append(u_t.copy())
    traj.xi_c.append(xi_c.copy())
    traj.p_w.append(np.zeros(grid.n_cells))
    traj.dual_max.append(0.0)
    traj.stab_ratio.append(np.inf)

    for step in range(1, tg.n_steps + 1):
        s_w_prev = s_w
        out = _advance(prob, s_w, s_n, s_n_direct, u_t, xi_c, cfg.dt,
                       halve=cfg.halve_on_violation)
        s_w, s_n, s_n_direct = out["s_w"], out["s_n"], out["s_n_direct"]
        u_t, xi_c = out["u_t"], out["xi_c"]
        if step == 1:
            traj.cfl_suggestion = cfl_dt(u_t, xi_c, prob.props, grid)
        traj.bounds_min.append(out["bounds_min"])
        traj.bounds_max.append(out["bounds_max"])
        if out["halved"]:
            traj.halved_steps.append(step)
        if tg.is_output(step):
            traj.times.append(step * cfg.dt)
            traj.s_w.append(s_w.copy())
            traj.s_n.append(s_n.copy())
            traj.s_w_prev.append(s_w_prev.copy())
            traj.u_t.append(u_t.copy())
            traj.xi_c.append(xi_c.copy())
            traj.p_w.append(out["p_w"].copy())
            traj.dual_max.append(float(np.abs(s_n_direct - s_n).max()))
            traj.stab_ratio.append(_stability_ratio(out["mob"], u_t,
                                                    prob.static.F_t, grid.h ** 2))
    traj.wall_time = _time.perf_counter() - t0
    return traj
