import numpy as np
import numpy.testing as npt
import pytest

from amps.errors import SingularMatrixError
from amps.factorization import (
    amd_order,
    backward_scaled_solve,
    factorize_ldlt,
    forward_solve_sparse,
    full_solve,
    full_solve_scatter,
)
from amps.sparse import SparseMatrix, load_matrix_market, reach_closure

from conftest import random_spd


def reconstruct(f):
    """(I + L) D (I + L)^T in the original numbering."""
    n = f.n
    l = f.lower().to_dense() + np.eye(n)
    kp = l @ np.diag(f.d) @ l.T
    out = np.empty_like(kp)
    out[np.ix_(f.perm, f.perm)] = kp
    return out


@pytest.mark.parametrize("ordering", ["amd", "natural"])
def test_factor_reconstructs_matrix(ordering):
    a = random_spd(20, seed=11)
    f = factorize_ldlt(a, ordering=ordering)
    npt.assert_allclose(reconstruct(f), a.to_dense(), rtol=1e-12, atol=1e-12)


def test_full_solve_matches_dense():
    a = random_spd(30, seed=12)
    rng = np.random.default_rng(13)
    b = rng.standard_normal(30)
    x = full_solve(factorize_ldlt(a), b)
    npt.assert_allclose(x, np.linalg.solve(a.to_dense(), b), rtol=1e-10)


def test_orderings_agree():
    a = random_spd(25, seed=14)
    b = np.random.default_rng(15).standard_normal(25)
    x1 = full_solve(factorize_ldlt(a, ordering="amd"), b)
    x2 = full_solve(factorize_ldlt(a, ordering="natural"), b)
    npt.assert_allclose(x1, x2, rtol=1e-10)


def test_amd_is_a_permutation():
    a = random_spd(18, seed=16)
    p = amd_order(a)
    npt.assert_array_equal(np.sort(p), np.arange(18))


def test_singular_matrix_raises_with_location():
    d = np.diag([2.0, 0.0, 3.0])
    with pytest.raises(SingularMatrixError) as ei:
        factorize_ldlt(SparseMatrix.from_dense(d), ordering="natural")
    assert ei.value.index == 1


def test_pivot_tol_rejects_tiny_pivot():
    d = np.diag([1.0, 1e-9, 1.0])
    a = SparseMatrix.from_dense(d)
    factorize_ldlt(a, ordering="natural")  # default tol passes
    with pytest.raises(SingularMatrixError):
        factorize_ldlt(a, ordering="natural", pivot_tol=1e-6)


def test_indefinite_matrix_factors():
    # LDL^T handles negative pivots without pivoting as long as none vanish
    d = np.diag([2.0, -3.0, 4.0])
    f = factorize_ldlt(SparseMatrix.from_dense(d), ordering="natural")
    npt.assert_allclose(f.d, [2.0, -3.0, 4.0])


def test_forward_solve_sparse_pattern_and_values():
    a = random_spd(24, seed=17)
    f = factorize_ldlt(a)
    for h in (0, 7, 23):
        pattern, vals = forward_solve_sparse(f, h)
        npt.assert_array_equal(pattern, reach_closure(f.lower(), [f.iperm[h]], f._workspace))
        e = np.zeros(24)
        e[f.iperm[h]] = 1.0
        full = np.linalg.solve(f.lower().to_dense() + np.eye(24), e)
        npt.assert_allclose(vals, full[pattern], rtol=1e-12, atol=1e-14)
        # everything off the pattern is exactly zero
        mask = np.ones(24, dtype=bool)
        mask[pattern] = False
        npt.assert_array_equal(full[mask], 0.0)


def test_backward_scaled_solve():
    a = random_spd(15, seed=18)
    f = factorize_ldlt(a)
    y = np.random.default_rng(19).standard_normal(15)
    lt = (f.lower().to_dense() + np.eye(15)).T
    npt.assert_allclose(backward_scaled_solve(f, y), np.linalg.solve(lt, y), rtol=1e-11)


def test_full_solve_scatter_matches_full_solve():
    a = random_spd(28, seed=20)
    f = factorize_ldlt(a)
    idx = np.array([3, 11, 26])
    vals = np.array([1.5, -2.0, 0.25])
    pattern = reach_closure(f.lower(), f.iperm[idx], f._workspace)
    b = np.zeros(28)
    b[idx] = vals
    npt.assert_allclose(full_solve_scatter(f, idx, vals, pattern), full_solve(f, b),
                        rtol=1e-12, atol=1e-14)


def test_nnz_counts_unit_diagonal():
    a = random_spd(10, seed=21)
    f = factorize_ldlt(a)
    assert f.nnz == f.Li.shape[0] + 10


def test_dump_writes_readable_factors(tmp_path):
    a = random_spd(9, seed=22)
    f = factorize_ldlt(a)
    f.dump(str(tmp_path / "fac"))
    l = load_matrix_market(tmp_path / "fac_L.mtx").to_dense()
    d = load_matrix_market(tmp_path / "fac_D.mtx").to_dense()
    kp = l @ d @ l.T
    npt.assert_allclose(kp, a.to_dense()[np.ix_(f.perm, f.perm)], rtol=1e-12, atol=1e-12)


def test_solve_shape_checks():
    f = factorize_ldlt(random_spd(5))
    with pytest.raises(ValueError):
        full_solve(f, np.ones(6))
    with pytest.raises(ValueError):
        forward_solve_sparse(f, 5)
