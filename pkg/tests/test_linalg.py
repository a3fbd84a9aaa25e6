import numpy as np
import pytest
import scipy.sparse as sp

from mspflow import fineops
from mspflow.linalg import (CompatibilityError, SaddleSystem, SolverError,
                            eig_sym_gen, solve_saddle, solve_spd)
from mspflow.mesh import GridHierarchy


def test_spd_identity():
    b = np.array([1.0, -2.0, 3.0])
    x = solve_spd(sp.eye(3, format="csr"), b)
    assert np.allclose(x, b, rtol=0, atol=0)


def test_spd_diagonal():
    x = solve_spd(sp.diags([2.0, 2.0, 2.0]).tocsr(), np.ones(3))
    assert np.allclose(x, 0.5)


def test_spd_random_residual():
    rng = np.random.default_rng(42)
    M = rng.normal(size=(50, 50))
    A = sp.csr_matrix(M.T @ M + 50 * np.eye(50))
    b = rng.normal(size=50)
    x = solve_spd(A, b, tol=1e-12)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_saddle_zero_rhs():
    A = sp.eye(3, format="csr")
    B = sp.csr_matrix(np.array([[1.0, 1.0, 0.0], [0.0, -1.0, 1.0]]))
    u, p = solve_saddle(SaddleSystem(A=A, B=B, f=np.zeros(3), g=np.zeros(2)))
    assert np.allclose(u, 0) and np.allclose(p, 0)


def test_saddle_two_cell_darcy():
    # two unit-permeability cells [0,h]x[0,h] side by side, source +q/-q:
    # one interior edge, A = 2h^2/3, constraint +-h u = +-q h^2
    # => u = q h, p0 - p1 = (2/3) q h^2, zero-mean gauge splits evenly.
    h, q = 0.5, 0.3
    A = sp.csr_matrix(np.array([[2 * h * h / 3]]))
    B = sp.csr_matrix(np.array([[h], [-h]]))
    f = np.zeros(1)
    g = np.array([q * h * h, -q * h * h])
    u, p = solve_saddle(SaddleSystem(A=A, B=B, f=f, g=g))
    assert u[0] == pytest.approx(q * h, rel=1e-13)
    assert p[0] - p[1] == pytest.approx((2.0 / 3.0) * q * h * h, rel=1e-13)
    assert abs(p.mean()) < 1e-15


def test_saddle_gauge_and_nullspace():
    rng = np.random.default_rng(1)
    n, k = 12, 6
    M = rng.normal(size=(n, n))
    A = sp.csr_matrix(M.T @ M + n * np.eye(n))
    B = rng.normal(size=(k, n))
    B -= B.mean(axis=0, keepdims=True)  # give B^T a constant nullspace
    B = sp.csr_matrix(B)
    f = rng.normal(size=n)
    g = rng.normal(size=k)
    g -= g.mean()
    u, p = solve_saddle(SaddleSystem(A=A, B=B, f=f, g=g))
    assert abs(p.mean()) < 1e-12
    # adding a constant to p leaves the first block residual unchanged
    r1 = A @ u - B.T @ p - f
    r2 = A @ u - B.T @ (p + 5.0) - f
    assert np.allclose(r1, r2, atol=1e-10)
    assert np.abs(B @ u - g).max() < 1e-12


def test_saddle_compatibility_error():
    A = sp.eye(2, format="csr")
    B = sp.csr_matrix(np.array([[1.0, -1.0]]))
    with pytest.raises(CompatibilityError):
        solve_saddle(SaddleSystem(A=A, B=B, f=np.zeros(2), g=np.array([1.0])))


def test_saddle_multi_rhs():
    A = sp.csr_matrix(np.diag([1.0, 2.0, 3.0]))
    B = sp.csr_matrix(np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 0.0]]))
    F = np.zeros((3, 2))
    G = np.column_stack([np.array([0.0, 0.0]), np.array([1.0, -1.0])])
    u, p = solve_saddle(SaddleSystem(A=A, B=B, f=F, g=G, gauge=None))
    for c in range(2):
        assert np.abs(B @ u[:, c] - G[:, c]).max() < 1e-12


def test_schur_path_matches_bordered():
    grid = GridHierarchy(12, 10, 2, 1.2, 1.0)
    rng = np.random.default_rng(3)
    kappa = np.exp(rng.normal(0, 1.5, grid.n_cells))
    A = fineops.mass_matrix(grid, 1.0 / kappa)
    ii = np.flatnonzero(grid.interior_edge_mask)
    A_ii = A[ii][:, ii]
    Dmat = fineops.divergence_matrix(grid)
    B = Dmat[:, ii]
    g = np.zeros(grid.n_cells)
    g[0], g[-1] = 1e-4, -1e-4
    f = rng.normal(0, 1e-6, ii.size)
    bands = fineops.interior_bands(grid, A)
    u1, p1 = solve_saddle(SaddleSystem(A=A_ii, B=B, f=f, g=g, bands=bands))
    u2, p2 = solve_saddle(SaddleSystem(A=A_ii, B=B, f=f, g=g))
    assert np.abs(u1 - u2).max() < 1e-12 * max(1.0, np.abs(u2).max())
    assert np.abs(p1 - p2).max() < 1e-10 * max(1.0, np.abs(p2).max())
    assert np.abs(B @ u1 - g).max() < 1e-16


def test_eig_identity_pencil():
    A = np.eye(4)
    w, V = eig_sym_gen(A, A)
    assert np.allclose(w, 1.0)


def test_eig_diagonal():
    w, V = eig_sym_gen(np.diag([1.0, 4.0]), np.eye(2))
    assert np.allclose(w, [1.0, 4.0])
    assert np.allclose(np.abs(V), np.eye(2))


def test_eig_random_pencil_residual():
    rng = np.random.default_rng(7)
    M = rng.normal(size=(10, 10))
    A = M.T @ M
    N = rng.normal(size=(10, 10))
    S = N.T @ N + 10 * np.eye(10)
    w, V = eig_sym_gen(A, S)
    assert np.all(np.diff(w) >= -1e-12)
    for lam, v in zip(w, V.T):
        assert np.linalg.norm(A @ v - lam * (S @ v)) <= 1e-10 * np.linalg.norm(A)
        assert v @ S @ v == pytest.approx(1.0, rel=1e-10)


def test_eig_not_pd_raises():
    with pytest.raises(SolverError):
        eig_sym_gen(np.eye(3), np.diag([1.0, -1.0, 1.0]))
