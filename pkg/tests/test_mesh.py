import numpy as np
import pytest

from mspflow.mesh import GridError, GridHierarchy


def test_paper_grid_dimensions():
    g = GridHierarchy(100, 100, 10, 1.0, 1.0)
    assert g.h == pytest.approx(0.01)
    assert (g.Nx, g.Ny) == (10, 10)
    assert g.H == pytest.approx(0.1)


def test_edge_and_cell_counts():
    g = GridHierarchy(2, 1, 1, 2.0, 1.0)
    assert g.n_cells == 2
    assert g.n_edges == 7  # 3 vertical + 4 horizontal


def test_interior_coarse_edge_count():
    g = GridHierarchy(100, 100, 10)
    assert g.interior_coarse_edges().size == 10 * 9 + 9 * 10

    g = GridHierarchy(6, 22, 1, 6.0, 22.0)
    assert g.interior_coarse_edges().size == 6 * 21 + 5 * 22

    g = GridHierarchy(4, 4, 2)
    assert g.interior_coarse_edges().size == 4

    g = GridHierarchy(3, 3, 3)
    assert g.interior_coarse_edges().size == 0


def test_build_errors():
    with pytest.raises(GridError):
        GridHierarchy(10, 10, 3)
    with pytest.raises(GridError):
        GridHierarchy(10, 10, 5, 1.0, 2.0)  # non-square cells
    with pytest.raises(GridError):
        GridHierarchy(0, 10, 1)


def test_total_area():
    g = GridHierarchy(20, 20, 5, 2.0, 2.0)
    assert g.n_cells * g.h ** 2 == pytest.approx(g.Lx * g.Ly, rel=1e-14)


def test_interior_edges_have_two_cells_with_opposite_orientation():
    g = GridHierarchy(8, 6, 2, 8.0, 6.0)
    counts = np.zeros(g.n_edges)
    orient = np.zeros(g.n_edges)
    for c in range(g.n_cells):
        for slot in range(4):
            counts[g.cell_edges[c, slot]] += 1
            orient[g.cell_edges[c, slot]] += g.cell_edge_signs[slot]
    interior = g.interior_edge_mask
    assert np.all(counts[interior] == 2)
    assert np.all(orient[interior] == 0)  # opposite induced orientations
    assert np.all(counts[~interior] == 1)


def test_owner_is_minus_side():
    g = GridHierarchy(4, 4, 2)
    e = g.vedge_id(2, 1)
    owner, neigh = g.edge_cells[e]
    assert owner == g.cell_id(1, 1)   # left cell
    assert neigh == g.cell_id(2, 1)
    e = g.hedge_id(1, 2)
    owner, neigh = g.edge_cells[e]
    assert owner == g.cell_id(1, 1)   # bottom cell
    assert neigh == g.cell_id(1, 2)


def test_neighborhood_structure():
    g = GridHierarchy(40, 20, 10, 2.0, 1.0)
    edge = g.coarse_vedge_id(1, 0)
    nb = g.neighborhood(edge)
    assert nb.edge_fine_edges.size == g.block
    assert len(nb.fine_cells) == 2 * g.block ** 2
    # union of the two coarse cells' fine cells
    expected = np.union1d(g.fine_cells_of_coarse(nb.cells[0]),
                          g.fine_cells_of_coarse(nb.cells[1]))
    assert np.array_equal(np.sort(nb.fine_cells), expected)
    # vertical neighborhood is a 2*block x block rectangle of fine cells
    ci = g.cell_i[nb.fine_cells]
    cj = g.cell_j[nb.fine_cells]
    assert ci.max() - ci.min() + 1 == 2 * g.block
    assert cj.max() - cj.min() + 1 == g.block


def test_adjacent_neighborhoods_share_one_coarse_cell():
    g = GridHierarchy(30, 30, 10, 3.0, 3.0)
    nb1 = g.neighborhood(g.coarse_vedge_id(1, 0))
    nb2 = g.neighborhood(g.coarse_vedge_id(2, 0))
    assert len(set(nb1.cells) & set(nb2.cells)) == 1


def test_boundary_coarse_edge_rejected():
    g = GridHierarchy(4, 4, 2)
    with pytest.raises(GridError):
        g.neighborhood(g.coarse_vedge_id(0, 0))
    with pytest.raises(GridError):
        g.neighborhood(g.coarse_hedge_id(0, 2))


def test_neighborhood_covers_all_interior_edge_cases():
    g = GridHierarchy(6, 6, 2, 1.0, 1.0)
    for e in g.interior_coarse_edges():
        nb = g.neighborhood(e)
        assert nb.cells[0] != nb.cells[1]
        assert nb.edge_fine_edges.size == g.block


def test_oversample_identity_and_growth():
    g = GridHierarchy(60, 60, 10, 1.0, 1.0)
    nb = g.neighborhood(g.coarse_vedge_id(3, 3))  # interior neighborhood 20x10
    r0 = g.oversample(nb, 0)
    assert np.array_equal(np.sort(r0.fine_cells), np.sort(nb.fine_cells))
    r3 = g.oversample(nb, 3)
    ci, cj = g.cell_i[r3.fine_cells], g.cell_j[r3.fine_cells]
    assert ci.max() - ci.min() + 1 == 26
    assert cj.max() - cj.min() + 1 == 16
    assert np.isin(nb.fine_cells, r3.fine_cells).all()


def test_oversample_clips_at_boundary():
    g = GridHierarchy(20, 20, 10)
    nb = g.neighborhood(g.coarse_vedge_id(1, 0))  # touches the domain boundary
    r = g.oversample(nb, 3)
    assert g.cell_i[r.fine_cells].min() >= 0
    assert g.cell_j[r.fine_cells].min() == 0  # clipped at y=0
    assert r.fine_cells.size == 20 * 13       # x-dilation clipped on both sides
    # interior fine edges all have both neighbors inside
    inside = np.zeros(g.n_cells, bool)
    inside[r.fine_cells] = True
    for e in r.interior_fine_edges:
        c0, c1 = g.edge_cells[e]
        assert inside[c0] and inside[c1]
