"""Warm-startable iterative solvers: Gauss-Seidel and multigrid-preconditioned CG.

The multigrid preconditioner is geometric. Unknowns are attached to cells, so
each level coarsens the set of active cells by two per axis with trilinear
(cell-centred) prolongation ``P``; restriction is ``P^T`` and coarse
operators are Galerkin products ``P^T A P``. Forward Gauss-Seidel before and
backward Gauss-Seidel after the coarse correction keep the V-cycle symmetric,
as CG requires. Without cell coordinates the preconditioner falls back to
Jacobi.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import IndefiniteMatrixError, SingularMatrixError

CONVERGED = "converged"
MAX_ITER = "max_iter"


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations: int
    relative_residual_history: list
    wall_time: float
    warm_started: bool
    status: str = CONVERGED
    method: str = ""

    @property
    def converged(self):
        return self.status == CONVERGED

    @property
    def relative_residual(self):
        return self.relative_residual_history[-1]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,residual\n")
            for i, r in enumerate(self.relative_residual_history):
                fh.write(f"{i},{r:.17g}\n")


def _unpack(A):
    coords = getattr(A, "coords", None)
    mat = getattr(A, "matrix", A)
    return sp.csr_matrix(mat), coords


def relative_residual(A, x, b):
    """||b - A x||_2 / ||b||_2 with 0/0 taken as 0."""
    mat, _ = _unpack(A)
    b = np.asarray(b, dtype=np.float64)
    r = float(np.linalg.norm(b - mat @ x))
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return 0.0 if r == 0.0 else np.inf
    return r / nb


@njit(cache=True)
def _gs_sweep(indptr, indices, data, diag, b, x, reverse):
    n = b.shape[0]
    for ii in range(n):
        i = n - 1 - ii if reverse else ii
        s = b[i]
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j != i:
                s -= data[k] * x[j]
        if diag[i] != 0.0:
            x[i] = s / diag[i]


def gs_sweep(mat, diag, b, x, reverse=False):
    _gs_sweep(mat.indptr, mat.indices, mat.data, diag, b, x, reverse)


def _check_diagonal(mat, b, coords):
    diag = mat.diagonal()
    active = (np.diff(mat.indptr) > 0) | (b != 0)
    bad = np.flatnonzero(active & (diag == 0))
    if len(bad):
        row = int(bad[0])
        raise SingularMatrixError(row, None if coords is None else coords[row])
    return diag


def _trivial(mat, b, x0, t0, method, warm):
    """Handle n == 0 and b == 0. Returns a report or None."""
    n = len(b)
    if n == 0:
        return SolveReport(np.zeros(0), 0, [0.0], time.perf_counter() - t0, warm, CONVERGED, method)
    if not np.any(b):
        x = x0 if not np.any(mat @ x0) else np.zeros(n)
        return SolveReport(x.copy(), 0, [0.0], time.perf_counter() - t0, warm, CONVERGED, method)
    return None


def _prepare(A, b, x0):
    mat, coords = _unpack(A)
    mat.sort_indices()
    b = np.ascontiguousarray(b, dtype=np.float64)
    n = mat.shape[0]
    if mat.shape != (n, n) or len(b) != n:
        raise ValueError(f"dimension mismatch: A {mat.shape}, b {b.shape}")
    warm = x0 is not None and bool(np.any(x0))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if len(x) != n:
        raise ValueError(f"x0 has {len(x)} entries, expected {n}")
    return mat, coords, b, x, warm


def gauss_seidel(A, b, x0=None, tol=1e-3, max_iter=None) -> SolveReport:
    """Lexicographic Gauss-Seidel until ||b - Ax|| / ||b|| <= tol."""
    t0 = time.perf_counter()
    mat, coords, b, x, warm = _prepare(A, b, x0)
    done = _trivial(mat, b, x, t0, "gs", warm)
    if done is not None:
        return done
    diag = _check_diagonal(mat, b, coords)
    if max_iter is None:
        max_iter = int(np.ceil(100 * len(b) ** (1 / 3)))
    nb = np.linalg.norm(b)
    hist = [float(np.linalg.norm(b - mat @ x) / nb)]
    it = 0
    while hist[-1] > tol and it < max_iter:
        gs_sweep(mat, diag, b, x)
        it += 1
        hist.append(float(np.linalg.norm(b - mat @ x) / nb))
    status = CONVERGED if hist[-1] <= tol else MAX_ITER
    return SolveReport(x, it, hist, time.perf_counter() - t0, warm, status, "gs")


# ---------------------------------------------------------------- multigrid

def _prolongation_1d(i, n_coarse):
    """Coarse neighbours and weights for fine cell indices ``i`` (cell-centred)."""
    c0 = i // 2
    c1 = c0 + np.where(i % 2 == 0, -1, 1)
    inside = (c1 >= 0) & (c1 < n_coarse)
    w0 = np.where(inside, 0.75, 1.0)
    w1 = np.where(inside, 0.25, 0.0)
    c1 = np.clip(c1, 0, n_coarse - 1)
    return (c0, w0), (c1, w1)


def prolongation(coords, dims):
    """Trilinear prolongation from the coarse cells touched by ``coords``.

    Returns (P, coarse_coords, coarse_dims) with P of shape (n_fine, n_coarse).
    """
    cdims = tuple((n + 1) // 2 for n in dims)
    per_axis = [_prolongation_1d(coords[:, a], cdims[a]) for a in range(3)]
    rows, cols, vals = [], [], []
    fine = np.arange(len(coords))
    for pick in np.ndindex(2, 2, 2):
        idx = [per_axis[a][pick[a]][0] for a in range(3)]
        w = per_axis[0][pick[0]][1] * per_axis[1][pick[1]][1] * per_axis[2][pick[2]][1]
        keep = w > 0
        rows.append(fine[keep])
        cols.append(np.ravel_multi_index([ix[keep] for ix in idx], cdims))
        vals.append(w[keep])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    used, cols = np.unique(cols, return_inverse=True)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(len(coords), len(used)))
    P.sum_duplicates()
    coarse_coords = np.stack(np.unravel_index(used, cdims), axis=1)
    return P, coarse_coords, cdims


@dataclass
class _Level:
    A: sp.csr_matrix
    diag: np.ndarray
    P: sp.csr_matrix = None


@dataclass
class Multigrid:
    levels: list = field(default_factory=list)
    coarse_inverse: np.ndarray = None
    smooth: int = 3

    @classmethod
    def build(cls, A, coords, dims=None, coarsest=4, smooth=3):
        A = sp.csr_matrix(A)
        coords = np.asarray(coords, dtype=np.int64)
        if dims is None:
            dims = tuple(int(c) + 1 for c in coords.max(axis=0))
        mg = cls(smooth=smooth)
        while max(dims) > coarsest and A.shape[0] > 8:
            P, coords, dims = prolongation(coords, dims)
            A.sort_indices()
            mg.levels.append(_Level(A, A.diagonal(), P))
            A = (P.T @ A @ P).tocsr()
            A = ((A + A.T) * 0.5).tocsr()
        A.sort_indices()
        mg.levels.append(_Level(A, A.diagonal()))
        mg.coarse_inverse = np.linalg.pinv(A.toarray(), hermitian=True)
        return mg

    def vcycle(self, r, level=0):
        lev = self.levels[level]
        if level == len(self.levels) - 1:
            return self.coarse_inverse @ r
        x = np.zeros_like(r)
        for _ in range(self.smooth):
            gs_sweep(lev.A, lev.diag, r, x)
        res = r - lev.A @ x
        x += lev.P @ self.vcycle(np.ascontiguousarray(lev.P.T @ res), level + 1)
        for _ in range(self.smooth):
            gs_sweep(lev.A, lev.diag, r, x, reverse=True)
        return x


def mgpcg(A, b, x0=None, tol=1e-3, max_iter=None, coords=None, dims=None) -> SolveReport:
    """Preconditioned conjugate gradient with a geometric multigrid V-cycle
    (or Jacobi when no cell coordinates are known)."""
    t0 = time.perf_counter()
    mat, sys_coords, b, x, warm = _prepare(A, b, x0)
    if coords is None:
        coords = sys_coords
    if dims is None:
        dims = getattr(A, "dims", None)
    done = _trivial(mat, b, x, t0, "mgpcg", warm)
    if done is not None:
        return done
    diag = _check_diagonal(mat, b, coords)
    n = len(b)
    if max_iter is None:
        max_iter = int(np.ceil(10 * n ** (1 / 3)))

    if coords is not None and n > 8:
        mg = Multigrid.build(mat, coords, dims)
        precond = mg.vcycle
    else:
        inv_diag = np.where(diag != 0, 1.0 / np.where(diag != 0, diag, 1.0), 0.0)

        def precond(r):
            return inv_diag * r

    nb = np.linalg.norm(b)
    r = b - mat @ x
    hist = [float(np.linalg.norm(r) / nb)]
    it = 0
    if hist[-1] > tol:
        z = precond(r)
        p = z.copy()
        rz = float(r @ z)
        while it < max_iter:
            Ap = mat @ p
            pAp = float(p @ Ap)
            if pAp <= 0.0:
                raise IndefiniteMatrixError(f"p^T A p = {pAp:.3e} at iteration {it}")
            alpha = rz / pAp
            x += alpha * p
            it += 1
            r = b - mat @ x
            hist.append(float(np.linalg.norm(r) / nb))
            if hist[-1] <= tol:
                break
            z = precond(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
    status = CONVERGED if hist[-1] <= tol else MAX_ITER
    return SolveReport(x, it, hist, time.perf_counter() - t0, warm, status, "mgpcg")


def solve(system, b=None, x0=None, tol=1e-3, method="gs", max_iter=None) -> SolveReport:
    b = system.rhs if b is None else b
    if method == "gs":
        return gauss_seidel(system, b, x0, tol, max_iter)
    if method == "mgpcg":
        return mgpcg(system, b, x0, tol, max_iter)
    raise ValueError(f"unknown solver {method!r}")
