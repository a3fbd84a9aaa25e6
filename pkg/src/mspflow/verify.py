"""Executable checks for the scheme's structural guarantees: per-cell
conservation residuals for both phases, dual-update consistency, bounds,
relative L2 errors against a reference, flux-sign agreement, phase-swap
unbiasedness, and the velocity/source stability ratio.

The conservation residual recomputes the transport balance with exactly the
same upwind values and effective source split as the solver, so a
solver-produced step leaves nothing but rounding.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fineops
from .config import RunConfig
from .mesh import GridHierarchy
from .physics import effective_phase_rates
from .pimpes import FineProblem, Trajectory

__all__ = [
    "RunReport", "conservation_residual", "dual_consistency", "bounds_check",
    "l2_error", "flux_sign_agreement", "unbiasedness_swap", "stability_ratio",
    "build_report",
]


def conservation_residual(prob: FineProblem, s_prev: np.ndarray,
                          s_next: np.ndarray, u_t: np.ndarray,
                          xi_c: np.ndarray, dt: float, phase: str = "w"
                          ) -> np.ndarray:
    """Per-cell mass balance defect of one step for the given phase.

    residual = zeta (S^{n+1} - S^n) h^2 / dt + boundary phase flux
    - cell source - sigma_alpha * capillary boundary term, evaluated with the
    solver's own upwind choices.
    """
    grid, props = prob.grid, prob.props
    choice = fineops.upwind_directions(grid, u_t, xi_c, s_prev, props,
                                       capillary_active=not prob.models_off)
    fw_e, _, g_w, _ = fineops.upwind_fractions(s_prev, choice, props)
    flux_w, flux_n = fineops.phase_edge_fluxes(u_t, xi_c, fw_e, g_w)
    q_w_eff, q_n_eff = effective_phase_rates(prob.sources, s_prev, props)
    h2 = grid.h ** 2
    Dmat = prob.static.Dmat
    if phase == "w":
        s_p, s_nx, flux, q = s_prev, s_next, flux_w, q_w_eff
    elif phase == "n":
        s_p, s_nx = 1.0 - s_prev, 1.0 - np.asarray(s_next)
        flux, q = flux_n, q_n_eff
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return (props.porosity * (np.asarray(s_nx) - np.asarray(s_p)) * h2 / dt
            + Dmat @ flux - q * h2)


def conservation_residuals_report(prob: FineProblem, traj: Trajectory,
                                  dt: float):
    """Max per-cell residual (both phases) at every recorded output time,
    normalized by the saturation-units scale zeta h^2 / dt."""
    scale = prob.props.porosity * prob.grid.h ** 2 / dt
    rows = []
    for k in range(1, len(traj.times)):
        s_prev = traj.s_w_prev[k]
        s_next_w = traj.s_w[k]
        r_w = conservation_residual(prob, s_prev, s_next_w, traj.u_t[k],
                                    traj.xi_c[k], dt, "w")
        r_n = conservation_residual(prob, s_prev, traj.s_w[k], traj.u_t[k],
                                    traj.xi_c[k], dt, "n")
        rows.append((traj.times[k], np.abs(r_w).max() / scale,
                     np.abs(r_n).max() / scale))
    return rows


def dual_consistency(traj: Trajectory) -> float:
    """Largest gap between S_n from 1 - S_w and from the direct update."""
    return max(traj.dual_max)


def bounds_check(s_field: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Indices of cells outside [-tol, 1 + tol]."""
    s = np.asarray(s_field)
    return np.flatnonzero((s < -tol) | (s > 1.0 + tol))


def l2_error(s_appro: np.ndarray, s_ref: np.ndarray) -> float:
    """Relative L2 error with (uniform) cell-area weighting."""
    a = np.asarray(s_appro, dtype=float)
    r = np.asarray(s_ref, dtype=float)
    if a.shape != r.shape:
        raise ValueError("fields live on different grids")
    den = np.linalg.norm(r)
    if den == 0.0:
        raise ValueError("reference field has zero norm")
    return float(np.linalg.norm(a - r) / den)


def flux_sign_agreement(u_fine: np.ndarray, u_ms: np.ndarray,
                        grid: GridHierarchy, tiny: float = 1e-14) -> float:
    """Fraction of interior fine edges where the two fluxes do not oppose.

    Edges where both magnitudes fall below ``tiny`` count as agreeing.
    """
    ii = grid.interior_edge_mask
    a, b = np.asarray(u_fine)[ii], np.asarray(u_ms)[ii]
    agree = (a * b >= 0.0) | ((np.abs(a) < tiny) & (np.abs(b) < tiny))
    return float(np.count_nonzero(agree)) / agree.size


def stability_ratio(grid: GridHierarchy, u_t: np.ndarray, q_t: np.ndarray,
                    kappa_n: np.ndarray) -> float:
    """Monitored ratio ||u||_{kappa^-1} / ||q_t||_{L2}; inf when q_t = 0."""
    qnorm = np.linalg.norm(np.asarray(q_t, dtype=float)) * grid.h
    if qnorm == 0.0:
        return np.inf
    A = fineops.mass_matrix(grid, 1.0 / np.asarray(kappa_n, dtype=float))
    energy = float(u_t @ (A @ u_t))
    return np.sqrt(max(energy, 0.0)) / qnorm


def unbiasedness_swap(cfg: RunConfig, kind: str = "fine",
                      traj: Trajectory = None) -> float:
    """Run the phase-relabeled configuration and compare its non-wetting
    saturation against the original wetting one at every output time."""
    from . import mssolver, pimpes
    runner = pimpes.run_fine if kind == "fine" else mssolver.run_ms
    if traj is None:
        traj = runner(cfg)
    swapped = runner(cfg.swapped())
    worst = 0.0
    for t, s_w in zip(traj.times, traj.s_w):
        k = swapped.index_at(t)
        worst = max(worst, float(np.abs(swapped.s_n[k] - s_w).max()))
    return worst


@dataclass
class RunReport:
    """Per-output-time diagnostics of one run, plus enrichment history."""

    times: list = field(default_factory=list)
    cons_w: list = field(default_factory=list)     # normalized by zeta h^2/dt
    cons_n: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    s_min: list = field(default_factory=list)
    s_max: list = field(default_factory=list)
    stab_ratio: list = field(default_factory=list)
    e_s: list = field(default_factory=list)        # empty without a reference
    agreement: list = field(default_factory=list)
    cfl_suggestion: float = np.inf
    enrichment_history: list = field(default_factory=list)

    def header(self):
        cols = ["t", "cons_w", "cons_n", "dual", "s_min", "s_max", "stab_ratio"]
        if self.e_s:
            cols.append("e_s")
        if self.agreement:
            cols.append("agreement")
        return cols

    def rows(self):
        base = [self.times, self.cons_w, self.cons_n, self.dual,
                self.s_min, self.s_max, self.stab_ratio]
        if self.e_s:
            base.append(self.e_s)
        if self.agreement:
            base.append(self.agreement)
        return list(zip(*base))


def build_report(cfg: RunConfig, traj: Trajectory, prob: FineProblem = None,
                 reference: Trajectory = None) -> RunReport:
    """Assemble the standard report; with a reference trajectory also the
    relative errors and flux-sign agreement at matching times."""
    if prob is None:
        prob = FineProblem.from_config(cfg)
    rep = RunReport(cfl_suggestion=traj.cfl_suggestion,
                    enrichment_history=list(traj.enrichment_history))
    cons = dict()
    for t, cw, cn in conservation_residuals_report(prob, traj, cfg.dt):
        cons[t] = (cw, cn)
    for k, t in enumerate(traj.times):
        if k == 0:
            continue
        cw, cn = cons[t]
        rep.times.append(t)
        rep.cons_w.append(cw)
        rep.cons_n.append(cn)
        rep.dual.append(traj.dual_max[k])
        rep.s_min.append(float(traj.s_w[k].min()))
        rep.s_max.append(float(traj.s_w[k].max()))
        rep.stab_ratio.append(traj.stab_ratio[k])
        if reference is not None:
            try:
                j = reference.index_at(t)
            except KeyError:
                rep.e_s.append(np.nan)
                rep.agreement.append(np.nan)
                continue
            rep.e_s.append(l2_error(traj.s_w[k], reference.s_w[j]))
            rep.agreement.append(flux_sign_agreement(reference.u_t[j],
                                                     traj.u_t[k], prob.grid))
    return rep
