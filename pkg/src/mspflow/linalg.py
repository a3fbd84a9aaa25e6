"""Sparse SPD solves, saddle-point solves with pressure-gauge handling, and
dense symmetric generalized eigendecomposition.

Two saddle paths are provided behind one interface:

* a general bordered sparse LU (works for any constraint row, used for
  local problems, reduced coarse systems and the capillary-on case), and
* a fast Schur-complement PCG for the symmetric case when the velocity
  mass matrix is tridiagonal in a known edge permutation (the structured
  RT0 grid), preconditioned with its mass-lumped (two-point) approximation.

All solves finish with iterative refinement so that constraint residuals
sit at the evaluation rounding floor; the explicit transport update divides
by cell volumes, which amplifies any leftover residual.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SolverError",
    "CompatibilityError",
    "SaddleSystem",
    "SaddleFactor",
    "solve_spd",
    "solve_saddle",
    "eig_sym_gen",
]

DEFAULT_TOL = 1e-12


class SolverError(RuntimeError):
    """A linear solve failed or did not reach the requested residual."""


class CompatibilityError(SolverError):
    """Pure-Neumann right-hand side violates the compatibility condition."""


def solve_spd(A, b, tol: float = DEFAULT_TOL):
    """Solve A x = b for symmetric positive definite sparse A.

    Guarantees ``||Ax - b|| <= tol * ||b||`` (relative residual), refining the
    direct solution if needed.  Accepts one right-hand side or a matrix of
    columns.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    x = lu.solve(b)
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros_like(b)
    for _ in range(3):
        r = b - A @ x
        if np.linalg.norm(r) <= tol * nb:
            return x
        x = x + lu.solve(r)
    r = np.linalg.norm(b - A @ x)
    if r > tol * nb:
        raise SolverError(f"SPD solve stalled at relative residual {r / nb:.3e}")
    return x


@dataclass
class SaddleSystem:
    """Blocks of [[A, -C], [B, 0]] [u; p] = [f; g].

    ``C`` defaults to ``B.T`` (the symmetric divergence case).  ``bands``
    optionally carries ``(ab, to_banded)`` where ``ab`` is the upper banded
    form of A under the permutation ``to_banded`` (u-index -> band position);
    it enables the Schur fast path when C is B.T.  With ``gauge`` set the
    pressure nullspace of the pure-Neumann problem is removed (zero-mean by
    default, or pinning the first cell).
    """

    A: object
    B: object
    f: np.ndarray
    g: np.ndarray
    C: object = None
    bands: tuple = None
    gauge: str = "zero-mean"

    def coupling(self):
        return self.B.T if self.C is None else self.C


def solve_saddle(sys: SaddleSystem, tol: float = DEFAULT_TOL):
    """Solve the saddle system; returns (u, p) with the pressure gauged.

    Right-hand sides may be vectors or matrices of columns (bordered path
    only).  Raises :class:`CompatibilityError` when the gauge is active and
    the constraint right-hand side does not sum to zero.
    """
    g = np.asarray(sys.g, dtype=float)
    f = np.asarray(sys.f, dtype=float)
    if sys.gauge is not None:
        gsum = np.abs(g.sum(axis=0))
        scale = max(1.0, np.abs(g).sum())
        if np.any(gsum > 1e-8 * scale):
            raise CompatibilityError(
                f"constraint rhs sums to {gsum} under a pure-Neumann gauge")
    if sys.bands is not None and sys.C is None and f.ndim == 1:
        return _solve_saddle_schur(sys, f, g, tol)
    return _solve_saddle_bordered(sys, f, g, tol)


def _gauge_vector(n: int, gauge: str):
    if gauge == "zero-mean":
        return np.ones(n)
    if gauge == "pin-first":
        w = np.zeros(n)
        w[0] = 1.0
        return w
    raise ValueError(f"unknown gauge {gauge!r}")


def _apply_gauge(p, gauge):
    if gauge == "zero-mean":
        return p - p.mean(axis=0)
    if gauge == "pin-first":
        return p - p[0]
    return p


class SaddleFactor:
    """Factorized bordered saddle matrix, reusable across right-hand sides."""

    def __init__(self, A, B, C=None, gauge: str = "zero-mean"):
        A = sp.csr_matrix(A)
        B = sp.csr_matrix(B)
        C = B.T if C is None else sp.csr_matrix(C)
        self.m, self.k = A.shape[0], B.shape[0]
        self.gauge = gauge
        if gauge is not None:
            w = _gauge_vector(self.k, gauge).reshape(self.k, 1)
            self.M = sp.bmat([[A, -C, None], [B, None, w], [None, w.T, None]],
                             format="csc")
        else:
            self.M = sp.bmat([[A, -C], [B, None]], format="csc")
        try:
            self.lu = spla.splu(self.M)
        except RuntimeError as exc:
            raise SolverError(f"saddle factorization failed: {exc}") from exc

    def solve(self, f, g, tol: float = DEFAULT_TOL):
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        squeeze = f.ndim == 1
        F = f.reshape(self.m, -1)
        G = g.reshape(self.k, -1)
        rhs = np.vstack([F, G])
        if self.gauge is not None:
            rhs = np.vstack([rhs, np.zeros((1, F.shape[1]))])
        x = self.lu.solve(rhs)
        scale = max(np.abs(rhs).max(), 1e-300)
        for _ in range(3):
            r = rhs - self.M @ x
            if np.abs(r).max() <= 1e-15 * scale:
                break
            x = x + self.lu.solve(r)
        r = rhs - self.M @ x
        if np.abs(r).max() > tol * max(1.0, scale):
            raise SolverError(
                f"saddle solve residual {np.abs(r).max():.3e} above tolerance")
        u, p = x[:self.m], x[self.m:self.m + self.k]
        p = _apply_gauge(p, self.gauge)
        if squeeze:
            return u[:, 0], p[:, 0]
        return u, p


def _solve_saddle_bordered(sys: SaddleSystem, f, g, tol):
    return SaddleFactor(sys.A, sys.B, sys.C, sys.gauge).solve(f, g, tol)


def _band_matvec(ab, x):
    d, s = ab[1], ab[0]
    y = d * x
    y[:-1] += s[1:] * x[1:]
    y[1:] += s[1:] * x[:-1]
    return y


def _solve_saddle_schur(sys: SaddleSystem, f, g, tol):
    """Eliminate u through a banded Cholesky of A, PCG on the pressure Schur
    complement with a mass-lumped preconditioner, then full-system refinement."""
    ab, to_band = sys.bands        # to_band[band position] = u index
    B = sp.csr_matrix(sys.B)
    k = B.shape[0]
    from_band = np.empty_like(to_band)
    from_band[to_band] = np.arange(to_band.size)
    Bb = B[:, to_band].tocsr()     # constraint over band-ordered unknowns

    try:
        cb = scipy.linalg.cholesky_banded(ab, lower=False)
    except scipy.linalg.LinAlgError as exc:
        raise SolverError(f"velocity mass matrix not positive definite: {exc}") from exc

    def ainv(b):
        return scipy.linalg.cho_solve_banded((cb, False), b)

    fb = f[to_band]

    # mass-lumped Schur approximation, pinned to make it definite
    rowsum = ab[1].copy()
    rowsum[:-1] += ab[0, 1:]
    rowsum[1:] += ab[0, 1:]
    T = (Bb @ sp.diags(1.0 / rowsum) @ Bb.T).tolil()
    T[0, 0] *= 2.0
    try:
        Tlu = spla.splu(T.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"preconditioner factorization failed: {exc}") from exc

    def schur_solve(rhs):
        """PCG for S p = rhs with S = B A^-1 B^T, constants deflated."""
        rhs = rhs - rhs.mean()
        nr0 = np.linalg.norm(rhs)
        p = np.zeros(k)
        if nr0 == 0:
            return p
        r = rhs.copy()
        z = Tlu.solve(r)
        z -= z.mean()
        d = z.copy()
        rz = r @ z
        for _ in range(400):
            Sd = Bb @ ainv(Bb.T @ d)
            alpha = rz / (d @ Sd)
            p += alpha * d
            r -= alpha * Sd
            if np.linalg.norm(r) <= 1e-15 * nr0:
                break
            z = Tlu.solve(r)
            z -= z.mean()
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
        return p

    p = schur_solve(g - Bb @ ainv(fb))
    ub = ainv(fb + Bb.T @ p)
    # refinement on the full system collapses the constraint residual
    for _ in range(2):
        r1 = fb - (_band_matvec(ab, ub) - Bb.T @ p)
        r2 = g - Bb @ ub
        dp = schur_solve(r2 - Bb @ ainv(r1))
        ub += ainv(r1 + Bb.T @ dp)
        p += dp
    r2 = np.abs(g - Bb @ ub).max()
    if r2 > tol * max(1.0, np.abs(g).max()):
        raise SolverError(f"Schur saddle solve constraint residual {r2:.3e}")
    u = ub[from_band]
    return u, _apply_gauge(p, sys.gauge)


def eig_sym_gen(A_dense, S_dense):
    """Eigenpairs of A v = lambda S v, ascending, S-orthonormal vectors.

    A must be symmetric positive semi-definite and S symmetric positive
    definite; both dense and small (local pencils).
    """
    A = np.asarray(A_dense, dtype=float)
    S = np.asarray(S_dense, dtype=float)
    try:
        w, V = scipy.linalg.eigh(A, S)
    except scipy.linalg.LinAlgError as exc:
        raise SolverError(f"generalized eigensolve failed (S not PD?): {exc}") from exc
    return w, V
