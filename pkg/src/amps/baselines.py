"""Reference solvers the incremental path is checked and timed against.

refactorize_solve is the from-scratch oracle: factor the current matrix and
solve, no reuse. cg_solve is the iterative baseline with an optional Jacobi
preconditioner.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SingularMatrixError
from .sparse import spmv

try:
    import cvxopt
    import cvxopt.cholmod
    _HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    _HAVE_CHOLMOD = False

__all__ = ["refactorize_solve", "cg_solve", "relative_residual", "CgReport"]


def _cholmod_solve(a, b):
    coo = a.to_scipy().tocoo()
    keep = coo.row >= coo.col
    spm = cvxopt.spmatrix(
        coo.data[keep], coo.row[keep].astype(np.int64), coo.col[keep].astype(np.int64),
        (a.nrows, a.ncols),
    )
    rhs = cvxopt.matrix(np.asarray(b, dtype=np.float64))
    try:
        cvxopt.cholmod.linsolve(spm, rhs)
    except ArithmeticError as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from exc
    return np.array(rhs).ravel()


def _splu_solve(a, b):
    import scipy.sparse.linalg

    try:
        lu = scipy.sparse.linalg.splu(a.to_scipy().tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    x = lu.solve(np.asarray(b, dtype=np.float64))
    if not np.isfinite(x).all():
        raise SingularMatrixError("factorization produced non-finite solution")
    return x


def refactorize_solve(a, b, backend="auto"):
    """Factor the symmetric positive definite matrix from scratch and solve.

    backend: 'cholmod' (sparse Cholesky), 'splu' (sparse LU), or 'auto'
    which picks cholmod when available.
    """
    if a.nrows != a.ncols:
        raise ValueError("matrix must be square")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.nrows,):
        raise ValueError("right-hand side length mismatch")
    if backend == "auto":
        backend = "cholmod" if _HAVE_CHOLMOD else "splu"
    if backend == "cholmod":
        return _cholmod_solve(a, b)
    if backend == "splu":
        return _splu_solve(a, b)
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class CgReport:
    iterations: int
    relative_residual: float
    converged: bool
    wall_time_s: float


def relative_residual(a, x, b):
    """||A x - b|| / ||b||, 2-norm."""
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(b)
    if denom == 0.0:
        raise ValueError("zero right-hand side has no relative residual")
    return float(np.linalg.norm(spmv(a, x) - b) / denom)


def cg_solve(a, b, abs_tol, precond="jacobi", maxiter=None):
    """Conjugate gradients on A x = b down to ||r||_2 <= abs_tol.

    The recurrence residual that triggers the stopping test is confirmed
    against the true residual, so ``converged`` is trustworthy. maxiter
    defaults to 10 n. Returns (x, CgReport).
    """
    b = np.asarray(b, dtype=np.float64)
    n = a.nrows
    if b.shape != (n,):
        raise ValueError("right-hand side length mismatch")
    if precond == "jacobi":
        diag = a.diagonal()
        if (diag <= 0).any():
            raise ValueError("Jacobi preconditioner needs positive diagonal")
        inv_diag = 1.0 / diag
    elif precond == "none":
        inv_diag = np.ones(n)
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")
    if maxiter is None:
        maxiter = 10 * n
    t0 = time.perf_counter()
    x, iters, converged = _kernels.pcg(
        a.col_ptr, a.row_idx, a.values, b, inv_diag, float(abs_tol), int(maxiter)
    )
    wall = time.perf_counter() - t0
    denom = np.linalg.norm(b)
    rel = float(np.linalg.norm(spmv(a, x) - b) / denom) if denom > 0 else 0.0
    return x, CgReport(int(iters), rel, bool(converged), wall)
