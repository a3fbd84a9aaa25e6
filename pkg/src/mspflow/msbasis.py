"""Multiscale velocity space construction.

Offline stage I: per interior coarse edge, snapshot fields with unit flux on
one fine edge of the coarse edge (solved independently on the two coarse
cells with compatible constant divergence), then a local spectral pencil
that keeps the smallest-eigenvalue combinations.

Offline stage II: residual-driven enrichment.  After a coarse Darcy solve,
the residual functional is represented over the snapshots of an oversampled
neighborhood; its trace on the coarse edge, normalized, drives one new local
basis per edge and iteration.

All bases are stored as fine-edge flux vectors supported inside their
neighborhood; the projection matrix stacks them as columns.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fineops, linalg
from .mesh import CoarseNeighborhood, GridHierarchy
from .physics import FluidProps, Medium, total_mobility_field

log = logging.getLogger(__name__)

__all__ = [
    "SnapshotSet", "SpectralSelection", "EdgeSpace", "MultiscaleSpace",
    "EnrichmentState", "BasisError",
    "build_snapshots", "spectral_reduce", "build_space", "coarse_darcy_solve",
    "residual_norm", "enrich_once", "enrich_until", "rebuild",
]


class BasisError(RuntimeError):
    """Basis construction failed (a local solve or pencil broke down)."""


@dataclass
class SnapshotSet:
    """Snapshot velocity fields of one coarse edge: unit flux on one fine edge
    of E_i, no-flow on the neighborhood boundary, constant divergence per half
    (+h/H^2 on the owner half, the opposite on the other)."""

    edge: int
    nbhd: CoarseNeighborhood
    support_edges: np.ndarray      # fine edges interior to D_i (includes E_i)
    flux: np.ndarray               # (n_support, L_i)
    pressures: tuple               # per-half local pressures, zero-mean
    alpha: tuple                   # divergence constants of the two halves

    @property
    def count(self) -> int:
        return self.flux.shape[1]


@dataclass
class SpectralSelection:
    """Eigenpairs of the local trace/energy pencil, ascending, and the chosen
    offline count."""

    edge: int
    eigenvalues: np.ndarray
    vectors: np.ndarray            # (L_i, L_i) snapshot-coefficient columns
    count: int


@dataclass
class EdgeSpace:
    """Velocity bases of one coarse edge (offline first, then online)."""

    edge: int
    nbhd: CoarseNeighborhood
    support_edges: np.ndarray
    basis: np.ndarray              # (n_support, n_bases)
    n_offline: int

    @property
    def count(self) -> int:
        return self.basis.shape[1]


@dataclass
class EnrichmentState:
    iterations: int = 0
    global_norms: list = field(default_factory=list)
    region_norms: list = field(default_factory=list)
    tol: float = 0.0
    skipped: list = field(default_factory=list)


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12 * max(np.abs(v).max(), 1e-300))
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def _interior_edges_of(grid: GridHierarchy, cells: np.ndarray) -> np.ndarray:
    inside = np.zeros(grid.n_cells, dtype=bool)
    inside[cells] = True
    adj = grid.edge_cells
    both = ((adj[:, 0] >= 0) & inside[np.maximum(adj[:, 0], 0)]
            & (adj[:, 1] >= 0) & inside[np.maximum(adj[:, 1], 0)])
    return np.flatnonzero(both)


def build_snapshots(grid: GridHierarchy, kappa_build: np.ndarray,
                    coarse_edge: int, solvers: dict = None) -> SnapshotSet:
    """Solve the 2 x L_i local problems of one coarse edge.

    ``solvers`` optionally caches :class:`fineops.LocalDarcy` factorizations
    keyed by coarse cell (each is shared by up to four edges).
    """
    nbhd = grid.neighborhood(coarse_edge)
    fe = nbhd.edge_fine_edges
    L = fe.size
    h, H = grid.h, grid.H
    support = _interior_edges_of(grid, nbhd.fine_cells)

    bnd = np.zeros((grid.n_edges, L))
    bnd[fe, np.arange(L)] = 1.0    # unit flux on one fine edge of E_i per column
    flux = np.zeros((support.size, L))
    pressures = []
    alphas = (h / H ** 2, -h / H ** 2)
    total = np.zeros((grid.n_edges, L))
    for p, cells in enumerate(nbhd.fine_cells_half):
        if solvers is not None:
            key = int(grid.coarse_cell_of_cell[cells[0]])
            solver = solvers.get(key)
            if solver is None:
                solver = fineops.LocalDarcy(grid, kappa_build, cells)
                solvers[key] = solver
        else:
            solver = fineops.LocalDarcy(grid, kappa_build, cells)
        target = np.full((cells.size, L), alphas[p] * h ** 2)
        try:
            u, pres = solver.solve(bnd, target)
        except linalg.SolverError as exc:
            raise BasisError(f"snapshot solve failed on edge {coarse_edge}: {exc}")
        total += u
        pressures.append(pres)
    total[fe] = np.eye(L)          # shared trace was added by both halves
    flux = total[support]
    return SnapshotSet(edge=coarse_edge, nbhd=nbhd, support_edges=support,
                       flux=flux, pressures=tuple(pressures), alpha=alphas)


def _edge_kappa(grid: GridHierarchy, kappa: np.ndarray, edges: np.ndarray):
    """Per-edge permeability, arithmetic mean of the adjacent cells."""
    adj = grid.edge_cells[edges]
    k0 = kappa[np.maximum(adj[:, 0], 0)]
    k1 = kappa[np.maximum(adj[:, 1], 0)]
    k0 = np.where(adj[:, 0] >= 0, k0, k1)
    k1 = np.where(adj[:, 1] >= 0, k1, k0)
    return 0.5 * (k0 + k1)


def spectral_reduce(grid: GridHierarchy, kappa_build: np.ndarray,
                    snapshots: SnapshotSet, count: int) -> SpectralSelection:
    """Reduce one edge's snapshot space with the trace/energy pencil.

    a(v, u) integrates kappa^-1 (v.n)(u.n) over the coarse edge (diagonal in
    the snapshot coefficients since traces are unit deltas); s(v, u) is the
    H(div) energy over the neighborhood scaled by 1/H.  Eigenvalues ascend;
    the ``count`` smallest eigenvectors become offline bases.
    """
    L = snapshots.count
    if not 1 <= count <= L:
        raise BasisError(f"offline count {count} outside 1..{L}")
    fe = snapshots.nbhd.edge_fine_edges
    h, H = grid.h, grid.H
    a = np.diag(h / _edge_kappa(grid, kappa_build, fe))

    cells = snapshots.nbhd.fine_cells
    sub = snapshots.support_edges
    Aloc = fineops.mass_matrix(grid, 1.0 / np.asarray(kappa_build, dtype=float))
    Asub = Aloc[sub][:, sub]
    F = snapshots.flux
    mass = F.T @ (Asub @ F)
    Dmat = fineops.divergence_matrix(grid)
    divF = (Dmat[cells][:, sub] @ F) / h ** 2      # per-cell divergence values
    div_part = divF.T @ divF * h ** 2
    s = (mass + div_part) / H

    w, V = linalg.eig_sym_gen(a, s)
    V = np.column_stack([_canonical_sign(V[:, j]) for j in range(V.shape[1])])
    return SpectralSelection(edge=snapshots.edge, eigenvalues=w, vectors=V,
                             count=count)


@dataclass
class MultiscaleSpace:
    """Per-coarse-edge velocity bases plus the projection matrices."""

    grid: GridHierarchy
    kappa_build: np.ndarray
    layers: int
    edges: np.ndarray                       # interior coarse edges, fixed order
    snapshots: dict                         # edge -> SnapshotSet
    spectral: dict                          # edge -> SpectralSelection
    edge_spaces: dict                       # edge -> EdgeSpace
    n_offline: int = 0
    n_online: int = 0
    phi_v: sp.csr_matrix = None
    phi_p: sp.csr_matrix = None
    basis_edges: np.ndarray = None          # owning coarse edge per phi_v column
    snap_matrix: sp.csr_matrix = None       # all snapshots as columns
    snap_cols: dict = None                  # edge -> column slice in snap_matrix
    A_build: sp.csr_matrix = None
    A_snap: sp.csr_matrix = None
    enrichment: EnrichmentState = None

    @property
    def label(self) -> str:
        l = "full" if self.n_offline == -1 else str(self.n_offline)
        return f"{l}+{self.n_online}"

    @property
    def n_ms(self) -> int:
        return self.phi_v.shape[1]

    def assemble_projection(self):
        """(Re)build phi_v from the edge bases and phi_p as coarse indicators."""
        grid = self.grid
        rows, cols, vals, owners = [], [], [], []
        col = 0
        for e in self.edges:
            es = self.edge_spaces[e]
            for j in range(es.count):
                rows.append(es.support_edges)
                cols.append(np.full(es.support_edges.size, col))
                vals.append(es.basis[:, j])
                owners.append(e)
                col += 1
        self.phi_v = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(grid.n_edges, col)).tocsr()
        self.basis_edges = np.array(owners)
        self.phi_p = sp.coo_matrix(
            (np.ones(grid.n_cells),
             (np.arange(grid.n_cells), grid.coarse_cell_of_cell)),
            shape=(grid.n_cells, grid.n_coarse_cells)).tocsr()
        return self.phi_v, self.phi_p

    def _assemble_snapshot_matrix(self):
        grid = self.grid
        rows, cols, vals = [], [], []
        self.snap_cols = {}
        col = 0
        for e in self.edges:
            sn = self.snapshots[e]
            self.snap_cols[e] = slice(col, col + sn.count)
            for j in range(sn.count):
                rows.append(sn.support_edges)
                cols.append(np.full(sn.support_edges.size, col))
                vals.append(sn.flux[:, j])
                col += 1
        self.snap_matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(grid.n_edges, col)).tocsr()
        self.A_build = fineops.mass_matrix(
            self.grid, 1.0 / np.asarray(self.kappa_build, dtype=float))
        self.A_snap = (self.snap_matrix.T @ (self.A_build @ self.snap_matrix)).tocsc()


def build_space(grid: GridHierarchy, kappa_build: np.ndarray, q_t: np.ndarray,
                offline: int, online: int = 0, layers: int = 3,
                tol: float = 0.0, max_iters: int = None,
                full_snapshot: bool = False) -> MultiscaleSpace:
    """Offline stage I (snapshots + spectral reduction) and optional stage II
    (``online`` residual-driven iterations, or down to ``tol``)."""
    edges = grid.interior_coarse_edges()
    snapshots, spectral, spaces = {}, {}, {}
    solvers = {}
    for e in edges:
        sn = build_snapshots(grid, kappa_build, e, solvers)
        snapshots[e] = sn
        if full_snapshot:
            basis = sn.flux.copy()
            n_off = sn.count
        else:
            sel = spectral_reduce(grid, kappa_build, sn, min(offline, sn.count))
            spectral[e] = sel
            basis = sn.flux @ sel.vectors[:, :sel.count]
            n_off = sel.count
        spaces[e] = EdgeSpace(edge=e, nbhd=sn.nbhd,
                              support_edges=sn.support_edges,
                              basis=basis, n_offline=n_off)
    space = MultiscaleSpace(grid=grid, kappa_build=np.asarray(kappa_build, float),
                            layers=layers, edges=edges, snapshots=snapshots,
                            spectral=spectral, edge_spaces=spaces,
                            n_offline=offline if not full_snapshot else -1,
                            n_online=0)
    space.assemble_projection()
    space._assemble_snapshot_matrix()
    space.enrichment = EnrichmentState(tol=tol)
    if online > 0 or tol > 0.0:
        iters = online if tol <= 0.0 else (max_iters or online or 100)
        enrich_until(space, q_t, tol, iters)
    return space


def coarse_darcy_solve(space: MultiscaleSpace, q_t: np.ndarray,
                       tol: float = 1e-12):
    """The reduced mixed Darcy problem in the current space with the build-time
    mobility field: returns (coefficients, coarse pressures)."""
    grid = space.grid
    A_t = (space.phi_v.T @ (space.A_build @ space.phi_v)).tocsr()
    Dmat = fineops.divergence_matrix(grid)
    C_t = (space.phi_v.T @ Dmat.T @ space.phi_p).tocsr()
    F_t = space.phi_p.T @ (np.asarray(q_t, dtype=float) * grid.h ** 2)
    sys = linalg.SaddleSystem(A=A_t, B=C_t.T.tocsr(), f=np.zeros(A_t.shape[0]),
                              g=F_t)
    return linalg.solve_saddle(sys, tol)


def _residual_vector(space: MultiscaleSpace, u_coeff: np.ndarray,
                     p_coarse: np.ndarray) -> np.ndarray:
    """Residual functional of the coarse solution on every snapshot."""
    u_fine = space.phi_v @ u_coeff
    p_fine = space.phi_p @ p_coarse
    Dmat = fineops.divergence_matrix(space.grid)
    work = space.A_build @ u_fine - Dmat.T @ p_fine
    return space.snap_matrix.T @ work


def _region_snapshot_columns(space: MultiscaleSpace, region) -> np.ndarray:
    """Columns of snapshots whose whole neighborhood lies inside the region."""
    inside = np.zeros(space.grid.n_cells, dtype=bool)
    inside[region.fine_cells] = True
    cols = []
    for e in space.edges:
        nb = space.snapshots[e].nbhd
        if inside[nb.fine_cells].all():
            cols.append(np.arange(space.snap_cols[e].start, space.snap_cols[e].stop))
    if not cols:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(cols)


def residual_norm(space: MultiscaleSpace, region, u_coeff: np.ndarray,
                  p_coarse: np.ndarray) -> float:
    """Riesz norm of the coarse-solve residual over the snapshot span.

    ``region`` is an :class:`OversampledRegion` (or None for the whole
    domain).  Solves the region's weighted mass problem for the Riesz
    representative and returns sqrt(r^T eta).
    """
    r = _residual_vector(space, u_coeff, p_coarse)
    if region is None:
        eta = linalg.solve_spd(space.A_snap, r)
        return float(np.sqrt(max(r @ eta, 0.0)))
    cols = _region_snapshot_columns(space, region)
    if cols.size == 0:
        return 0.0
    sub = space.A_snap[cols][:, cols].toarray()
    eta = np.linalg.solve(sub, r[cols])
    return float(np.sqrt(max(r[cols] @ eta, 0.0)))


def _edge_groups(space: MultiscaleSpace):
    """Four sweeps (vertical/horizontal x parity) with disjoint neighborhoods
    inside each group, deterministic order."""
    grid = space.grid
    groups = [[], [], [], []]
    for e in space.edges:
        if e < grid.n_coarse_vedges:
            J, I = divmod(int(e), grid.Nx + 1)
            groups[I % 2].append(e)
        else:
            J, I = divmod(int(e) - grid.n_coarse_vedges, grid.Nx)
            groups[2 + J % 2].append(e)
    return groups


def enrich_once(space: MultiscaleSpace, q_t: np.ndarray,
                precomputed: tuple = None):
    """One residual-driven iteration: per interior coarse edge, build the
    Riesz representative over the oversampled region's snapshots, normalize
    its trace on the edge, solve the local constant-divergence extension and
    append it.  Returns (global residual norm before, per-edge norms)."""
    grid = space.grid
    h, H = grid.h, grid.H
    if precomputed is None:
        u_coeff, p_coarse = coarse_darcy_solve(space, q_t)
    else:
        u_coeff, p_coarse = precomputed
    r = _residual_vector(space, u_coeff, p_coarse)
    eta_glob = linalg.solve_spd(space.A_snap, r)
    global_norm = float(np.sqrt(max(r @ eta_glob, 0.0)))

    region_norms = {}
    new_traces = {}
    for group in _edge_groups(space):
        for e in group:
            sn = space.snapshots[e]
            region = grid.oversample(sn.nbhd, space.layers)
            cols = _region_snapshot_columns(space, region)
            if cols.size == 0:
                space.enrichment.skipped.append(int(e))
                continue
            sub = space.A_snap[cols][:, cols].toarray()
            try:
                eta = np.linalg.solve(sub, r[cols])
            except np.linalg.LinAlgError as exc:
                raise BasisError(f"region solve failed on edge {e}: {exc}")
            region_norms[int(e)] = float(np.sqrt(max(r[cols] @ eta, 0.0)))
            # trace of the representative on E_i
            eta_flux = space.snap_matrix[:, cols] @ eta
            trace = eta_flux[sn.nbhd.edge_fine_edges]
            norm = np.sqrt(np.sum(trace ** 2) * h)
            if norm <= 1e-14 * max(1.0, np.abs(eta_flux).max()):
                log.info("enrichment: zero residual trace on coarse edge %d, skipped", e)
                space.enrichment.skipped.append(int(e))
                continue
            new_traces[int(e)] = trace / norm

    solvers = {}
    for e in space.edges:
        lam = new_traces.get(int(e))
        if lam is None:
            continue
        sn = space.snapshots[e]
        fe = sn.nbhd.edge_fine_edges
        bnd = np.zeros(grid.n_edges)
        bnd[fe] = lam
        flux_int = float(np.sum(lam) * h)       # integral of the trace over E_i
        total = np.zeros(grid.n_edges)
        for p, cells in enumerate(sn.nbhd.fine_cells_half):
            gamma = (flux_int if p == 0 else -flux_int) / H ** 2
            key = int(grid.coarse_cell_of_cell[cells[0]])
            solver = solvers.get(key)
            if solver is None:
                solver = fineops.LocalDarcy(grid, space.kappa_build, cells)
                solvers[key] = solver
            u, _ = solver.solve(bnd, np.full(cells.size, gamma * h ** 2))
            total += u
        total[fe] = lam
        es = space.edge_spaces[e]
        es.basis = np.column_stack([es.basis, total[es.support_edges]])

    space.n_online += 1
    space.assemble_projection()
    space.enrichment.iterations += 1
    space.enrichment.global_norms.append(global_norm)
    space.enrichment.region_norms.append(region_norms)
    return global_norm, region_norms


def enrich_until(space: MultiscaleSpace, q_t: np.ndarray, tol: float,
                 max_iters: int):
    """Enrich while the global residual norm exceeds ``tol`` (always stopping
    after ``max_iters``); records the post-loop norm as well."""
    for _ in range(max_iters):
        u_coeff, p_coarse = coarse_darcy_solve(space, q_t)
        norm = residual_norm(space, None, u_coeff, p_coarse)
        if tol > 0.0 and norm <= tol:
            space.enrichment.global_norms.append(norm)
            return space
        enrich_once(space, q_t, precomputed=(u_coeff, p_coarse))
    u_coeff, p_coarse = coarse_darcy_solve(space, q_t)
    space.enrichment.global_norms.append(
        residual_norm(space, None, u_coeff, p_coarse))
    return space


def rebuild(space: MultiscaleSpace, s_w_field: np.ndarray, medium: Medium,
            props: FluidProps, q_t: np.ndarray) -> MultiscaleSpace:
    """Re-run the stored recipe with the mobility field of the current state."""
    kappa_build = total_mobility_field(s_w_field, medium, props)
    offline = space.n_offline
    full = offline == -1
    return build_space(space.grid, kappa_build, q_t,
                       offline=max(offline, 1), online=space.n_online,
                       layers=space.layers, tol=space.enrichment.tol,
                       full_snapshot=full)
