"""Sparse LDL^T factorization of symmetric positive definite matrices.

Up-looking column factorization guided by the elimination tree, no pivoting.
A fill-reducing permutation is applied internally; solves exchange vectors in
the original numbering.
"""

import numpy as np

from . import _kernels
from .errors import SingularMatrixError
from .sparse import SparseMatrix, Workspace, reach_closure, save_matrix_market

__all__ = [
    "Factors",
    "factorize_ldlt",
    "full_solve",
    "forward_solve_sparse",
    "backward_scaled_solve",
    "full_solve_scatter",
    "amd_order",
]


class Factors:
    """Holds L, D and the permutation of one factorization.

    K[perm][:,perm] = (I + L) D (I + L)^T, L strictly lower triangular in
    CSC (Lp, Li, Lx), D a vector. ``perm[i]`` is the original index of the
    i-th pivot; ``iperm`` its inverse.
    """

    __slots__ = ("n", "perm", "iperm", "Lp", "Li", "Lx", "d", "_workspace", "_lower")

    def __init__(self, n, perm, iperm, Lp, Li, Lx, d):
        self.n = int(n)
        self.perm = perm
        self.iperm = iperm
        self.Lp = Lp
        self.Li = Li
        self.Lx = Lx
        self.d = d
        self._workspace = Workspace(self.n)
        self._lower = None

    @property
    def nnz(self):
        """Entry count of L including the unit diagonal."""
        return int(self.Li.shape[0]) + self.n

    def lower(self):
        """L as a SparseMatrix (strictly lower triangle, no diagonal)."""
        if self._lower is None:
            self._lower = SparseMatrix(self.n, self.n, self.Lp, self.Li, self.Lx, check=False)
        return self._lower

    def dump(self, prefix):
        """Write L (with explicit unit diagonal) and D to Matrix Market files
        ``<prefix>_L.mtx`` and ``<prefix>_D.mtx``."""
        n = self.n
        rows = np.concatenate([np.arange(n, dtype=np.int32), self.Li])
        cols = np.concatenate(
            [np.arange(n, dtype=np.int32), np.repeat(np.arange(n), np.diff(self.Lp))]
        )
        vals = np.concatenate([np.ones(n), self.Lx])
        lmat = SparseMatrix.from_coo(n, n, rows, cols, vals)
        save_matrix_market(lmat, f"{prefix}_L.mtx", symmetric=False)
        dmat = SparseMatrix.from_coo(n, n, np.arange(n), np.arange(n), self.d)
        save_matrix_market(dmat, f"{prefix}_D.mtx", symmetric=False)


def amd_order(a):
    """Approximate minimum degree ordering of a symmetric sparse matrix."""
    from cvxopt import amd, spmatrix

    n = a.nrows
    if n == 0:
        return np.empty(0, dtype=np.int32)
    s = a.to_scipy().tocoo()
    mask = s.row >= s.col
    sp = spmatrix(
        1.0, s.row[mask].tolist(), s.col[mask].tolist(), (n, n)
    )
    p = amd.order(sp)
    return np.fromiter(p, dtype=np.int32, count=n)


def factorize_ldlt(a, ordering="amd", pivot_tol=None):
    """Factor a symmetric positive definite SparseMatrix as P K P^T = L D L^T.

    Parameters
    ----------
    a : SparseMatrix
        Symmetric, full pattern stored.
    ordering : {"amd", "natural"}
        Fill-reducing permutation, or the identity.
    pivot_tol : float, optional
        Pivots with magnitude at or below this are rejected. Defaults to
        1e-12 * max|K|.

    Raises
    ------
    SingularMatrixError
        On a zero or near-zero pivot; carries the pivot position and the
        original index.
    """
    if a.nrows != a.ncols:
        raise ValueError("matrix must be square")
    n = a.nrows
    if pivot_tol is None:
        pivot_tol = 1e-12 * (abs(a.values).max() if a.nnz else 1.0)
    if ordering == "amd":
        perm = amd_order(a)
    elif ordering == "natural":
        perm = np.arange(n, dtype=np.int32)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    iperm = np.empty(n, dtype=np.int32)
    iperm[perm] = np.arange(n, dtype=np.int32)

    ap = a if ordering == "natural" else a.permuted(perm)

    parent = np.empty(n, dtype=np.int32)
    counts = np.zeros(n, dtype=np.int64)
    flag = np.empty(n, dtype=np.int32)
    _kernels.ldl_symbolic(n, ap.col_ptr, ap.row_idx, parent, counts, flag)

    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    nnz = int(Lp[-1])
    Li = np.empty(nnz, dtype=np.int32)
    Lx = np.empty(nnz)
    d = np.empty(n)
    y = np.zeros(n)
    pat = np.empty(n, dtype=np.int32)
    stack = np.empty(n, dtype=np.int32)
    lnz = np.zeros(n, dtype=np.int64)
    bad = _kernels.ldl_numeric(
        n, ap.col_ptr, ap.row_idx, ap.values, parent, Lp, Li, Lx, d, y, pat, stack, flag,
        lnz, pivot_tol,
    )
    if bad >= 0:
        orig = int(perm[bad])
        raise SingularMatrixError(
            f"zero or near-zero pivot at elimination step {bad} (original index {orig})",
            pivot=int(bad),
            index=orig,
        )
    return Factors(n, perm, iperm, Lp, Li, Lx, d)


def full_solve(f, b):
    """Solve K x = b through the factors: permute, forward, scale, backward,
    permute back."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (f.n,):
        raise ValueError(f"b has shape {b.shape}, expected ({f.n},)")
    x = b[f.perm].astype(np.float64)
    _kernels.forward_full(f.Lp, f.Li, f.Lx, x)
    x /= f.d
    _kernels.backward_full(f.Lp, f.Li, f.Lx, x)
    out = np.empty(f.n)
    out[f.perm] = x
    return out


def forward_solve_sparse(f, h):
    """Sparse forward solve v = L^{-1} e_{perm(h)} for one original index h.

    Returns ``(rows, vals)`` in factor coordinates: rows is the reach
    closure of the seed (ascending int32), vals the solution restricted to
    it. Cost is proportional to the closure, not n.
    """
    h = int(h)
    if not 0 <= h < f.n:
        raise ValueError("index out of range")
    seed = np.array([f.iperm[h]], dtype=np.int32)
    pattern = reach_closure(f.lower(), seed, f._workspace)
    x = np.zeros(f.n)
    x[seed[0]] = 1.0
    _kernels.forward_pattern(f.Lp, f.Li, f.Lx, pattern, x)
    vals = x[pattern].copy()
    return pattern, vals


def backward_scaled_solve(f, y):
    """Solve L^T x = y in factor coordinates. The caller handles any
    permutation and D scaling."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (f.n,):
        raise ValueError(f"y has shape {y.shape}, expected ({f.n},)")
    x = y.copy()
    _kernels.backward_full(f.Lp, f.Li, f.Lx, x)
    return x


def full_solve_scatter(f, idx, vals, pattern):
    """Solve K x = H z for a scattered right-hand side.

    ``idx``/``vals`` give the nonzeros in original numbering; ``pattern``
    must contain the reach closure of their permuted positions (ascending,
    factor coordinates). One pattern-driven forward pass plus one full
    backward pass.
    """
    x = np.zeros(f.n)
    x[f.iperm[idx]] = vals
    _kernels.forward_pattern(f.Lp, f.Li, f.Lx, pattern, x)
    x[pattern] /= f.d[pattern]
    _kernels.backward_full(f.Lp, f.Li, f.Lx, x)
    out = np.empty(f.n)
    out[f.perm] = x
    return out
