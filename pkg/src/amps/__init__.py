"""Sparse symmetric solver with incremental principal-submatrix updates,
plus the FEM cutting benchmark built on it."""

from .engine import (
    AmpsState,
    UpdateRequest,
    extend_memo,
    impose_dirichlet,
    init,
    set_load,
    set_threads,
    solve_updated,
    solve_updated_alt,
)
from .errors import DegenerateElementError, SingularMatrixError, SingularUpdateError
from .factorization import Factors, factorize_ldlt, full_solve
from .sparse import SparseMatrix, load_matrix_market, save_matrix_market, spmv

__version__ = "0.1.0"

__all__ = [
    "AmpsState",
    "UpdateRequest",
    "init",
    "set_load",
    "set_threads",
    "extend_memo",
    "solve_updated",
    "solve_updated_alt",
    "impose_dirichlet",
    "SparseMatrix",
    "spmv",
    "save_matrix_market",
    "load_matrix_market",
    "Factors",
    "factorize_ldlt",
    "full_solve",
    "SingularMatrixError",
    "SingularUpdateError",
    "DegenerateElementError",
    "__version__",
]
