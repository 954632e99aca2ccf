"""Compressed sparse column matrices and graph reachability.

Symmetric matrices store the full pattern (both triangles). Row indices are
strictly ascending within each column and duplicates are coalesced on
construction.
"""

import numpy as np
import scipy.io
import scipy.sparse

from . import _kernels

__all__ = [
    "SparseMatrix",
    "spmv",
    "reach_closure",
    "Workspace",
    "save_matrix_market",
    "load_matrix_market",
]


class SparseMatrix:
    """Sparse matrix in CSC form.

    ``row_idx[col_ptr[j]:col_ptr[j+1]]`` holds the ascending row indices of
    column j, with ``values`` aligned. ``col_ptr`` is int64 of length
    ncols + 1, ``row_idx`` int32.
    """

    __slots__ = ("nrows", "ncols", "col_ptr", "row_idx", "values")

    def __init__(self, nrows, ncols, col_ptr, row_idx, values, check=True):
        self.nrows = int(nrows)
        self.ncols = int(ncols)
        self.col_ptr = np.ascontiguousarray(col_ptr, dtype=np.int64)
        self.row_idx = np.ascontiguousarray(row_idx, dtype=np.int32)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if check:
            self._validate()

    def _validate(self):
        if self.nrows < 0 or self.ncols < 0:
            raise ValueError("negative dimension")
        if self.col_ptr.shape[0] != self.ncols + 1:
            raise ValueError("col_ptr length must be ncols + 1")
        if self.col_ptr[0] != 0 or self.col_ptr[-1] != self.row_idx.shape[0]:
            raise ValueError("col_ptr endpoints inconsistent with nnz")
        if np.any(np.diff(self.col_ptr) < 0):
            raise ValueError("col_ptr must be nondecreasing")
        if self.row_idx.shape[0] != self.values.shape[0]:
            raise ValueError("row_idx and values length mismatch")
        if self.nnz:
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.nrows:
                raise ValueError("row index out of range")
            d = np.diff(self.row_idx)
            if d.shape[0]:
                # a drop is allowed only where a new column starts
                mask = np.ones(d.shape[0], dtype=bool)
                starts = self.col_ptr[1:-1]
                starts = starts[(starts > 0) & (starts <= d.shape[0])]
                mask[starts - 1] = False
                if np.any(d[mask] <= 0):
                    raise ValueError("row indices must be strictly ascending per column")

    @property
    def nnz(self):
        return int(self.row_idx.shape[0])

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @classmethod
    def from_coo(cls, nrows, ncols, rows, cols, vals):
        """Build from triplets; duplicate entries are summed."""
        s = scipy.sparse.coo_matrix(
            (np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(nrows, ncols)
        ).tocsc()
        s.sum_duplicates()
        s.sort_indices()
        return cls(nrows, ncols, s.indptr, s.indices, s.data, check=False)

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("expected a 2-d array")
        rows, cols = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], rows, cols, a[rows, cols])

    @classmethod
    def from_scipy(cls, s):
        s = s.tocsc()
        s.sum_duplicates()
        s.sort_indices()
        return cls(s.shape[0], s.shape[1], s.indptr, s.indices, s.data, check=False)

    def to_scipy(self):
        return scipy.sparse.csc_matrix(
            (self.values, self.row_idx, self.col_ptr), shape=self.shape
        )

    def to_dense(self):
        return self.to_scipy().toarray()

    def copy(self):
        return SparseMatrix(
            self.nrows,
            self.ncols,
            self.col_ptr.copy(),
            self.row_idx.copy(),
            self.values.copy(),
            check=False,
        )

    def diagonal(self):
        if self.nrows != self.ncols:
            raise ValueError("diagonal of a non-square matrix")
        return self.to_scipy().diagonal()

    def permuted(self, perm):
        """Symmetric permutation: returns A[perm,:][:,perm]."""
        perm = np.asarray(perm)
        return SparseMatrix.from_scipy(self.to_scipy()[perm, :][:, perm])

    def is_symmetric(self, rel_tol=0.0):
        s = self.to_scipy()
        diff = abs(s - s.T)
        if diff.nnz == 0:
            return True
        scale = max(abs(self.values).max(), 1.0) if self.nnz else 1.0
        return diff.max() <= rel_tol * scale

    def __matmul__(self, x):
        return spmv(self, x)

    def __repr__(self):
        return f"SparseMatrix({self.nrows}x{self.ncols}, nnz={self.nnz})"


def spmv(a, x):
    """Matrix-vector product A @ x.

    Accumulation order is fixed: columns ascending, entries within a column
    in ascending row order.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (a.ncols,):
        raise ValueError(f"x has shape {x.shape}, expected ({a.ncols},)")
    y = np.zeros(a.nrows)
    _kernels.spmv_csc(a.col_ptr, a.row_idx, a.values, x, y)
    return y


class Workspace:
    """Reusable mark array for reachability queries.

    Marks are stamped with a generation counter so no reset pass is needed
    between calls.
    """

    def __init__(self, n):
        self.n = int(n)
        self.marks = np.zeros(self.n, dtype=np.int64)
        self.gen = 0
        self.stack = np.empty(self.n, dtype=np.int32)
        self.out = np.empty(self.n, dtype=np.int32)

    def next_gen(self):
        self.gen += 1
        return self.gen


def reach_closure(a, seeds, workspace=None):
    """Transitive closure of ``seeds`` under edges j -> i where A[i,j] != 0
    and i > j. Returns the closed set sorted ascending (int32).

    For a lower-triangular factor L this is the nonzero pattern of
    L^{-1} e_s for unit seeds s.
    """
    if a.nrows != a.ncols:
        raise ValueError("closure needs a square matrix")
    seeds = np.asarray(seeds, dtype=np.int32)
    if seeds.size == 0:
        return np.empty(0, dtype=np.int32)
    if seeds.min() < 0 or seeds.max() >= a.nrows:
        raise ValueError("seed out of range")
    ws = workspace if workspace is not None else Workspace(a.nrows)
    if ws.n != a.nrows:
        raise ValueError("workspace sized for a different matrix")
    gen = ws.next_gen()
    cnt = _kernels.reach_mark(a.col_ptr, a.row_idx, seeds, ws.marks, gen, ws.stack, ws.out)
    out = ws.out[:cnt].copy()
    out.sort()
    return out


def save_matrix_market(a, path, symmetric=None):
    """Write in Matrix Market coordinate format.

    Symmetric matrices are stored as their lower triangle with the
    ``symmetric`` qualifier; pass ``symmetric=False`` to force general
    storage. Default: detect.
    """
    s = a.to_scipy()
    if symmetric is None:
        symmetric = a.nrows == a.ncols and a.is_symmetric()
    if symmetric:
        scipy.io.mmwrite(path, scipy.sparse.tril(s), symmetry="symmetric")
    else:
        scipy.io.mmwrite(path, s, symmetry="general")


def load_matrix_market(path):
    """Read a Matrix Market file; symmetric storage is expanded to the full
    pattern."""
    s = scipy.io.mmread(path)
    if not scipy.sparse.issparse(s):
        s = scipy.sparse.coo_matrix(np.atleast_2d(s))
    return SparseMatrix.from_scipy(s)
