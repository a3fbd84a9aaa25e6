"""Fine-grid operators: RT0 mass matrices, divergence coupling, source and
boundary vectors, upwind flux matrices, and a general local mixed Darcy
solver for subdomains.

The velocity space is lowest-order Raviart-Thomas on the square fine cells:
one degree of freedom per edge, the normal flux with respect to the edge's
fixed +x/+y normal.  Per cell, the exact mass block per axis couples the two
opposite edges with diagonal h^2/3 and off-diagonal h^2/6 (times the cell's
inverse permeability weight); the divergence coupling puts +-h into the two
adjacent cells of an edge, positive on the owner (-normal) side.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import linalg
from .mesh import GridHierarchy
from .physics import (CapillaryModel, FluidProps, GravityModel, Medium,
                      Sources, fractional_flow, total_mobility_field)

__all__ = [
    "DofLayout",
    "StaticOps",
    "MobilityOps",
    "UpwindChoice",
    "assemble_static",
    "assemble_mobility",
    "mass_matrix",
    "interior_bands",
    "upwind_directions",
    "upwind_fractions",
    "assemble_upwind",
    "phase_edge_fluxes",
    "LocalDarcy",
    "solve_local_darcy",
]


@dataclass
class DofLayout:
    """Velocity unknowns are interior-edge fluxes; boundary edges carry
    prescribed Neumann values (zero by default, no-flow)."""

    grid: GridHierarchy
    neumann_values: np.ndarray

    @classmethod
    def no_flow(cls, grid: GridHierarchy) -> "DofLayout":
        return cls(grid=grid, neumann_values=np.zeros(grid.n_edges))

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.grid.interior_edge_mask)

    @property
    def n_interior(self) -> int:
        return int(self.grid.interior_edge_mask.sum())

    def expand(self, u_int: np.ndarray) -> np.ndarray:
        """Interior unknowns -> full edge vector with prescribed boundary values."""
        u = self.neumann_values.copy()
        u[self.interior_edges] = u_int
        return u


def divergence_matrix(grid: GridHierarchy) -> sp.csr_matrix:
    """Cells-by-edges matrix with (Dmat u)[K] = integral over K of div u.

    Cached on the grid: it is immutable once built.
    """
    cached = getattr(grid, "_divergence_matrix", None)
    if cached is not None:
        return cached
    ids = np.arange(grid.n_cells)
    rows = np.tile(ids, 4)
    cols = grid.cell_edges.T.ravel()
    vals = np.repeat(grid.cell_edge_signs * grid.h, grid.n_cells)
    Dmat = sp.coo_matrix((vals, (rows, cols)),
                         shape=(grid.n_cells, grid.n_edges)).tocsr()
    grid._divergence_matrix = Dmat
    return Dmat


@dataclass
class StaticOps:
    """Operators independent of saturation."""

    C: sp.csr_matrix        # edges x cells, C[e, K] = integral_K div v_e
    Dmat: sp.csr_matrix     # cells x edges, = C.T (constraint row skeleton)
    P_diag: np.ndarray      # pressure mass diagonal, cell areas h^2
    D_vec: np.ndarray       # Dirichlet boundary vector (zero: Gamma_D empty)
    F_w: np.ndarray
    F_n: np.ndarray
    F_t: np.ndarray


def assemble_static(grid: GridHierarchy, sources: Sources,
                    layout: DofLayout = None) -> StaticOps:
    Dmat = divergence_matrix(grid)
    h2 = grid.h ** 2
    F_w = sources.q_w * h2
    F_n = sources.q_n * h2
    return StaticOps(
        C=Dmat.T.tocsr(),
        Dmat=Dmat,
        P_diag=np.full(grid.n_cells, h2),
        D_vec=np.zeros(grid.n_edges),
        F_w=F_w,
        F_n=F_n,
        F_t=F_w + F_n,
    )


def mass_matrix(grid: GridHierarchy, cell_weight: np.ndarray,
                lumped: bool = False) -> sp.csr_matrix:
    """RT0 velocity mass matrix with a constant weight per cell.

    ``cell_weight`` is the factor under the integral (e.g. 1/kappa_n);
    ``lumped`` collapses each axis pair to the diagonal h^2/2 row sums.
    """
    w = np.asarray(cell_weight, dtype=float)
    h2 = grid.h ** 2
    e = grid.cell_edges
    pairs = ((e[:, 0], e[:, 1]), (e[:, 2], e[:, 3]))
    rows, cols, vals = [], [], []
    for a, b in pairs:
        if lumped:
            rows += [a, b]
            cols += [a, b]
            vals += [w * h2 / 2, w * h2 / 2]
        else:
            rows += [a, a, b, b]
            cols += [a, b, a, b]
            vals += [w * h2 / 3, w * h2 / 6, w * h2 / 6, w * h2 / 3]
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_edges, grid.n_edges)).tocsr()


@dataclass
class MobilityOps:
    """Saturation-dependent operators, rebuilt every time step."""

    A: sp.csr_matrix
    A_n: sp.csr_matrix
    P_c_vec: np.ndarray
    E_vec: np.ndarray
    kappa_n: np.ndarray


def assemble_mobility(grid: GridHierarchy, medium: Medium, props: FluidProps,
                      s_w_field: np.ndarray,
                      capillary: CapillaryModel = CapillaryModel(),
                      gravity: GravityModel = GravityModel(),
                      static: StaticOps = None,
                      lumped: bool = False) -> MobilityOps:
    kappa_n = total_mobility_field(s_w_field, medium, props)
    if np.any(kappa_n <= 0):
        raise ValueError("nonpositive mobility-weighted permeability")
    inv = 1.0 / kappa_n
    A = mass_matrix(grid, inv, lumped=lumped)
    f_n = fractional_flow(s_w_field, props, "n")
    A_n = mass_matrix(grid, f_n * inv, lumped=lumped)
    P_c_vec = capillary.value(np.asarray(s_w_field, dtype=float))
    if gravity.is_off:
        E_vec = np.zeros(grid.n_edges)
    else:
        C = static.C if static is not None else divergence_matrix(grid).T.tocsr()
        # int g grad(z) . v = -int z div v for cellwise-constant depth
        E_vec = -gravity.g * (C @ np.asarray(gravity.z, dtype=float))
    return MobilityOps(A=A, A_n=A_n, P_c_vec=P_c_vec, E_vec=E_vec, kappa_n=kappa_n)


def interior_bands(grid: GridHierarchy, A: sp.csr_matrix):
    """Banded (upper) form of the interior-interior block of a mass matrix.

    Interior vertical edges are tridiagonal along grid rows in the native
    ordering; interior horizontal edges become tridiagonal along columns
    after a column-major permutation.  Returns ``(ab, to_band)`` for
    :class:`mspflow.linalg.SaddleSystem`, validating that no coupling falls
    outside the band.
    """
    nx, ny = grid.nx, grid.ny
    n_iv = (nx - 1) * ny
    n_ih = nx * (ny - 1)
    # to_band[band position] = interior-edge index
    to_band = np.empty(n_iv + n_ih, dtype=np.int64)
    to_band[:n_iv] = np.arange(n_iv)
    i = np.repeat(np.arange(nx), ny - 1)
    j = np.tile(np.arange(1, ny), nx)
    to_band[n_iv:] = n_iv + (j - 1) * nx + i
    interior = np.flatnonzero(grid.interior_edge_mask)
    Aii = A[interior][:, interior]
    Ab = Aii[to_band][:, to_band].tocsr()
    diag = Ab.diagonal()
    sup = Ab.diagonal(1)
    tri = sp.diags([sup, diag, sup], [-1, 0, 1], format="csr")
    if abs(Ab - tri).sum() > 0:
        raise linalg.SolverError("mass matrix is not tridiagonal in band order")
    ab = np.zeros((2, diag.size))
    ab[1] = diag
    ab[0, 1:] = sup
    return ab, to_band


@dataclass
class UpwindChoice:
    """Per edge and phase, the fine cell whose saturation feeds the fractional
    flow on that edge.  On boundary edges both phases use the single adjacent
    cell (the element's own value on inflow)."""

    cell_w: np.ndarray
    cell_n: np.ndarray

    @property
    def shared(self) -> bool:
        return self.cell_w is self.cell_n or np.array_equal(self.cell_w, self.cell_n)


def _pick(grid: GridHierarchy, sign_value: np.ndarray) -> np.ndarray:
    owner = grid.edge_cells[:, 0]
    neigh = grid.edge_cells[:, 1]
    pick = np.where(sign_value >= 0, owner, neigh)
    only = np.where(owner >= 0, owner, neigh)
    return np.where(grid.boundary_edge_mask, only, pick)


def upwind_directions(grid: GridHierarchy, u_t: np.ndarray, xi_c: np.ndarray,
                      s_w_field: np.ndarray, props: FluidProps,
                      capillary_active: bool = False) -> UpwindChoice:
    """Select the upwind cell per edge and phase from the phase-flux signs.

    Phase fluxes are reconstructed with arithmetic-average fractional flows
    of the two adjacent cells; a zero flux ties to the owner cell.  Without
    capillary/gravity both phases follow sign(u_t . n).
    """
    if not capillary_active or xi_c is None or not np.any(xi_c):
        cell = _pick(grid, u_t)
        return UpwindChoice(cell_w=cell, cell_n=cell)
    f_w = fractional_flow(np.asarray(s_w_field, dtype=float), props, "w")
    owner = grid.edge_cells[:, 0].copy()
    neigh = grid.edge_cells[:, 1].copy()
    only = np.where(owner >= 0, owner, neigh)
    owner[owner < 0] = only[owner < 0]
    neigh[neigh < 0] = only[neigh < 0]
    favg = 0.5 * (f_w[owner] + f_w[neigh])
    gavg = 0.5 * (f_w[owner] * (1 - f_w[owner]) + f_w[neigh] * (1 - f_w[neigh]))
    u_w = favg * u_t - gavg * xi_c
    u_n = (1.0 - favg) * u_t + gavg * xi_c
    return UpwindChoice(cell_w=_pick(grid, u_w), cell_n=_pick(grid, u_n))


def upwind_fractions(s_w_field: np.ndarray, choice: UpwindChoice, props: FluidProps):
    """Per-edge fractional flows at the upwind values.

    Returns (f_w at S*_w, f_n at S*_n, f_w f_n at S*_w, f_w f_n at S*_n).
    """
    s = np.asarray(s_w_field, dtype=float)
    fw_w = fractional_flow(s[choice.cell_w], props, "w")
    if choice.shared:
        fw_n = fw_w
    else:
        fw_n = fractional_flow(s[choice.cell_n], props, "w")
    f_n = 1.0 - fw_n
    return fw_w, f_n, fw_w * (1.0 - fw_w), fw_n * (1.0 - fw_n)


def assemble_upwind(grid: GridHierarchy, s_w_field: np.ndarray,
                    choice: UpwindChoice, props: FluidProps,
                    static: StaticOps = None):
    """Upwind flux matrices B_w, B_n, B_c, B_t (cells x edges).

    B_alpha rows accumulate +-h f_alpha(S*) over each cell's edges; B_c uses
    f_w f_n at the wetting upwind value; B_t = B_w + B_n.
    """
    Dmat = static.Dmat if static is not None else divergence_matrix(grid)
    fw, fn, g_w, _ = upwind_fractions(s_w_field, choice, props)
    B_w = (Dmat @ sp.diags(fw)).tocsr()
    B_n = (Dmat @ sp.diags(fn)).tocsr()
    B_c = (Dmat @ sp.diags(g_w)).tocsr()
    return {"B_w": B_w, "B_n": B_n, "B_c": B_c, "B_t": (B_w + B_n).tocsr()}


def phase_edge_fluxes(u_t: np.ndarray, xi_c: np.ndarray, fw_edge: np.ndarray,
                      g_edge: np.ndarray):
    """Wetting and non-wetting edge fluxes from the total and capillary ones.

    flux_w = f_w u_t - f_w f_n xi_c; flux_n is the complement u_t - flux_w,
    so the pair recovers the total flux to within one ulp per edge.
    """
    flux_w = fw_edge * u_t
    if xi_c is not None and np.any(xi_c):
        flux_w = flux_w - g_edge * xi_c
    return flux_w, u_t - flux_w


class LocalDarcy:
    """Factorized mixed Darcy operator on a subdomain with fully prescribed
    boundary flux; reusable across right-hand sides.

    The same coarse cell serves as a half-domain of up to four coarse-edge
    neighborhoods, so keeping the factorization pays off during basis
    construction.
    """

    def __init__(self, grid: GridHierarchy, kappa_cell: np.ndarray,
                 cells: np.ndarray):
        cells = np.asarray(cells, dtype=np.int64)
        inside = np.zeros(grid.n_cells, dtype=bool)
        inside[cells] = True
        adj = grid.edge_cells
        owner_in = (adj[:, 0] >= 0) & inside[np.maximum(adj[:, 0], 0)]
        neigh_in = (adj[:, 1] >= 0) & inside[np.maximum(adj[:, 1], 0)]
        self.grid = grid
        self.cells = cells
        self.int_edges = np.flatnonzero(owner_in & neigh_in)
        self.bnd_edges = np.flatnonzero(owner_in ^ neigh_in)
        edges = np.concatenate([self.int_edges, self.bnd_edges])
        eloc = -np.ones(grid.n_edges, dtype=np.int64)
        eloc[edges] = np.arange(edges.size)

        h, h2 = grid.h, grid.h ** 2
        w = 1.0 / np.asarray(kappa_cell, dtype=float)[cells]
        ce = eloc[grid.cell_edges[cells]]      # local edge ids per local cell
        rows, cols, vals = [], [], []
        for a, b in ((ce[:, 0], ce[:, 1]), (ce[:, 2], ce[:, 3])):
            rows += [a, a, b, b]
            cols += [a, b, a, b]
            vals += [w * h2 / 3, w * h2 / 6, w * h2 / 6, w * h2 / 3]
        self.A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(edges.size, edges.size)).tocsr()
        nloc = cells.size
        self.Dl = sp.coo_matrix(
            (np.repeat(grid.cell_edge_signs * h, nloc),
             (np.tile(np.arange(nloc), 4), ce.T.ravel())),
            shape=(nloc, edges.size)).tocsr()
        ni = self.int_edges.size
        self.factor = None
        if ni:
            self.factor = linalg.SaddleFactor(self.A[:ni, :ni],
                                              self.Dl[:, :ni], gauge="zero-mean")

    def solve(self, bnd_flux: np.ndarray, div_target: np.ndarray,
              tol: float = linalg.DEFAULT_TOL):
        """Solve for interior fluxes; ``bnd_flux`` is a full-edge array (or
        matrix of columns), ``div_target`` per-cell integrated divergence in
        the order of ``cells``.  Returns full-edge fluxes and zero-mean local
        pressures."""
        ni = self.int_edges.size
        bf = np.asarray(bnd_flux, dtype=float)
        squeeze = bf.ndim == 1
        gb = bf.reshape(self.grid.n_edges, -1)[self.bnd_edges]
        tgt = np.asarray(div_target, dtype=float).reshape(self.cells.size, -1)
        u = np.zeros((self.grid.n_edges, gb.shape[1]))
        u[self.bnd_edges] = gb
        if ni == 0:
            p = np.zeros((self.cells.size, gb.shape[1]))
        else:
            f = -(self.A[:ni, ni:] @ gb)
            g = tgt - self.Dl[:, ni:] @ gb
            u_int, p = self.factor.solve(f, g, tol)
            u[self.int_edges] = u_int.reshape(ni, -1)
        if squeeze:
            return u[:, 0], p.reshape(self.cells.size, -1)[:, 0]
        return u, p


def solve_local_darcy(grid: GridHierarchy, kappa_cell: np.ndarray,
                      cells: np.ndarray, bnd_flux: np.ndarray,
                      div_target: np.ndarray, tol: float = linalg.DEFAULT_TOL):
    """One-shot wrapper around :class:`LocalDarcy`."""
    return LocalDarcy(grid, kappa_cell, cells).solve(bnd_flux, div_target, tol)
