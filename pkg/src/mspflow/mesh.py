"""Nested fine/coarse structured rectangular grids with edge and cell indexing.

Conventions (fixed throughout the package):

* Fine cells are squares of side ``h``, indexed row-major with the row
  ``y = 0`` first: ``cell_id = j * nx + i`` for column ``i`` and row ``j``.
* Every edge carries a fixed unit normal pointing in ``+x`` (vertical
  edges) or ``+y`` (horizontal edges).  Velocity degrees of freedom are
  normal fluxes with respect to these fixed normals.
* Vertical edges come first in the global edge ordering, scanned with
  ``i`` fastest, then horizontal edges.  The same scheme is used on the
  coarse grid.
* For an edge, the adjacent cell on the ``-normal`` side (left / bottom)
  is called the *owner*; the ``+normal`` side cell is the *neighbor*.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridError",
    "GridHierarchy",
    "CoarseNeighborhood",
    "OversampledRegion",
]


class GridError(ValueError):
    """Raised for inconsistent grid configuration."""


@dataclass(frozen=True)
class CoarseNeighborhood:
    """Two coarse cells sharing an interior coarse edge.

    ``cells[0]`` is the owner-side coarse cell (its outward normal on the
    shared edge equals the edge normal), ``cells[1]`` the other one.
    """

    edge: int
    cells: tuple
    fine_cells_half: tuple       # (owner-half fine cells, other half)
    edge_fine_edges: np.ndarray  # fine edges on E_i in geometric order

    @property
    def fine_cells(self) -> np.ndarray:
        return np.concatenate(self.fine_cells_half)


@dataclass(frozen=True)
class OversampledRegion:
    """A coarse-edge neighborhood dilated by fine-cell layers, clipped to the domain."""

    base: CoarseNeighborhood
    layers: int
    fine_cells: np.ndarray
    interior_fine_edges: np.ndarray


class GridHierarchy:
    """Uniform square fine grid nested in a coarse grid of ``block x block`` cells.

    Parameters
    ----------
    nx, ny : int
        Fine cell counts per axis; each must be divisible by ``block``.
    block : int
        Fine cells per coarse cell per axis.
    Lx, Ly : float
        Domain side lengths; fine cells must come out square.
    """

    def __init__(self, nx: int, ny: int, block: int, Lx: float = 1.0, Ly: float = 1.0):
        if nx <= 0 or ny <= 0 or block <= 0:
            raise GridError("nx, ny, block must be positive")
        if nx % block or ny % block:
            raise GridError(f"block {block} must divide nx={nx} and ny={ny}")
        if not np.isclose(Lx / nx, Ly / ny, rtol=1e-12, atol=0.0):
            raise GridError(f"cells are not square: Lx/nx={Lx / nx} != Ly/ny={Ly / ny}")

        self.nx, self.ny, self.block = nx, ny, block
        self.Lx, self.Ly = float(Lx), float(Ly)
        self.h = self.Lx / nx
        self.H = self.h * block
        self.Nx, self.Ny = nx // block, ny // block

        self.n_cells = nx * ny
        self.n_vedges = (nx + 1) * ny
        self.n_hedges = nx * (ny + 1)
        self.n_edges = self.n_vedges + self.n_hedges

        ids = np.arange(self.n_cells)
        self.cell_j, self.cell_i = np.divmod(ids, nx)
        self.cell_x = (self.cell_i + 0.5) * self.h
        self.cell_y = (self.cell_j + 0.5) * self.h

        # per-cell edge ids in slot order [left, right, bottom, top],
        # outward normal vs fixed edge normal gives signs [-1, +1, -1, +1]
        self.cell_edges = np.column_stack([
            self.vedge_id(self.cell_i, self.cell_j),
            self.vedge_id(self.cell_i + 1, self.cell_j),
            self.hedge_id(self.cell_i, self.cell_j),
            self.hedge_id(self.cell_i, self.cell_j + 1),
        ])
        self.cell_edge_signs = np.array([-1.0, 1.0, -1.0, 1.0])

        # per-edge adjacent cells [owner (-side), neighbor (+side)], -1 if absent
        self.edge_cells = np.full((self.n_edges, 2), -1, dtype=np.int64)
        e = self.cell_edges
        self.edge_cells[e[:, 0], 1] = ids   # cell lies on + side of its left edge
        self.edge_cells[e[:, 1], 0] = ids
        self.edge_cells[e[:, 2], 1] = ids
        self.edge_cells[e[:, 3], 0] = ids

        self.boundary_edge_mask = (self.edge_cells < 0).any(axis=1)
        self.interior_edge_mask = ~self.boundary_edge_mask
        self.edge_is_vertical = np.zeros(self.n_edges, dtype=bool)
        self.edge_is_vertical[: self.n_vedges] = True

        # coarse bookkeeping
        self.n_coarse_cells = self.Nx * self.Ny
        self.coarse_cell_of_cell = (self.cell_j // block) * self.Nx + (self.cell_i // block)
        self.n_coarse_vedges = (self.Nx + 1) * self.Ny
        self.n_coarse_hedges = self.Nx * (self.Ny + 1)
        self.n_coarse_edges = self.n_coarse_vedges + self.n_coarse_hedges

    # -- index helpers -------------------------------------------------

    def cell_id(self, i, j):
        return j * self.nx + i

    def vedge_id(self, i, j):
        """Vertical edge at x-line i (0..nx), row j (0..ny-1)."""
        return j * (self.nx + 1) + i

    def hedge_id(self, i, j):
        """Horizontal edge at column i (0..nx-1), y-line j (0..ny)."""
        return self.n_vedges + j * self.nx + i

    def coarse_cell_id(self, I, J):
        return J * self.Nx + I

    def coarse_vedge_id(self, I, J):
        return J * (self.Nx + 1) + I

    def coarse_hedge_id(self, I, J):
        return self.n_coarse_vedges + J * self.Nx + I

    def fine_cells_of_coarse(self, coarse_cell: int) -> np.ndarray:
        """Fine cell ids inside a coarse cell, row-major."""
        J, I = divmod(coarse_cell, self.Nx)
        b = self.block
        ii = np.arange(I * b, (I + 1) * b)
        jj = np.arange(J * b, (J + 1) * b)
        return (jj[:, None] * self.nx + ii[None, :]).ravel()

    # -- operations ----------------------------------------------------

    def interior_coarse_edges(self) -> np.ndarray:
        """Interior coarse edge ids: vertical sweep first, then horizontal."""
        out = []
        for J in range(self.Ny):
            for I in range(1, self.Nx):
                out.append(self.coarse_vedge_id(I, J))
        for J in range(1, self.Ny):
            for I in range(self.Nx):
                out.append(self.coarse_hedge_id(I, J))
        return np.array(out, dtype=np.int64)

    def neighborhood(self, coarse_edge: int) -> CoarseNeighborhood:
        """The two coarse cells sharing an interior coarse edge, plus fine indexing."""
        b = self.block
        if coarse_edge < self.n_coarse_vedges:
            J, I = divmod(coarse_edge, self.Nx + 1)
            if I == 0 or I == self.Nx:
                raise GridError(f"coarse edge {coarse_edge} lies on the boundary")
            k1 = self.coarse_cell_id(I - 1, J)
            k2 = self.coarse_cell_id(I, J)
            fe = self.vedge_id(I * b, np.arange(J * b, (J + 1) * b))
        else:
            k = coarse_edge - self.n_coarse_vedges
            J, I = divmod(k, self.Nx)
            if J == 0 or J == self.Ny:
                raise GridError(f"coarse edge {coarse_edge} lies on the boundary")
            k1 = self.coarse_cell_id(I, J - 1)
            k2 = self.coarse_cell_id(I, J)
            fe = self.hedge_id(np.arange(I * b, (I + 1) * b), J * b)
        return CoarseNeighborhood(
            edge=coarse_edge,
            cells=(k1, k2),
            fine_cells_half=(self.fine_cells_of_coarse(k1), self.fine_cells_of_coarse(k2)),
            edge_fine_edges=np.asarray(fe, dtype=np.int64),
        )

    def oversample(self, nbhd: CoarseNeighborhood, layers: int) -> OversampledRegion:
        """Dilate D_i by ``layers`` fine cells in all directions, clipped to the domain."""
        if layers < 0:
            raise GridError("layers must be >= 0")
        cells = nbhd.fine_cells
        i0 = max(self.cell_i[cells].min() - layers, 0)
        i1 = min(self.cell_i[cells].max() + layers, self.nx - 1)
        j0 = max(self.cell_j[cells].min() - layers, 0)
        j1 = min(self.cell_j[cells].max() + layers, self.ny - 1)
        ii = np.arange(i0, i1 + 1)
        jj = np.arange(j0, j1 + 1)
        box = (jj[:, None] * self.nx + ii[None, :]).ravel()
        inside = np.zeros(self.n_cells, dtype=bool)
        inside[box] = True
        both = inside[self.edge_cells[:, 0]] & inside[self.edge_cells[:, 1]]
        both &= self.interior_edge_mask
        return OversampledRegion(
            base=nbhd,
            layers=layers,
            fine_cells=box,
            interior_fine_edges=np.flatnonzero(both),
        )
