"""Incremental re-solution of a factored system under local updates.

The original system K a = f is factored once. Afterwards the matrix may be
modified inside a growing index set of tracked DOFs and extended with new
DOFs, and each modified system is solved through a small dense update system
plus sparse triangular solves, never refactoring.

Conventions: the update set holds m original DOF ids in insertion order; k
new DOFs occupy ids n .. n+k-1 in arrival order. The dense update E of order
m + k is cumulative against the original matrix padded with an identity
block: K_hat = Kbar - Hbar (E + diag(0_m, I_k)) Hbar^T.
"""

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import SingularMatrixError, SingularUpdateError
from .factorization import factorize_ldlt, full_solve, full_solve_scatter
from .sparse import reach_closure, spmv

__all__ = [
    "AmpsState",
    "UpdateRequest",
    "init",
    "set_load",
    "extend_memo",
    "solve_updated",
    "solve_updated_alt",
    "impose_dirichlet",
    "dirichlet_rhs",
    "set_threads",
    "get_threads",
]


def set_threads(t):
    """Set the worker thread count for the parallel memo kernels."""
    _kernels.set_num_threads(int(t))


def get_threads():
    return _kernels.get_num_threads()


class _Timer:
    def __init__(self, timings, key):
        self.timings = timings
        self.key = key

    def __enter__(self):
        self.t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc):
        if self.timings is not None:
            us = (time.perf_counter_ns() - self.t0) / 1000.0
            self.timings[self.key] = self.timings.get(self.key, 0.0) + us
        return False


@dataclass
class UpdateRequest:
    """One solve request against the current state.

    ``new_replaced_dofs`` must already be memoized via :func:`extend_memo`.
    ``new_dof_count`` new DOFs are appended by this request. ``e`` is the
    cumulative dense update over the post-update ordering and ``f_hat`` the
    full right-hand side of length n + k_total.
    """

    new_replaced_dofs: np.ndarray
    new_dof_count: int
    e: np.ndarray
    f_hat: np.ndarray


class AmpsState:
    """Factorization plus memoized quantities for incremental solves."""

    def __init__(self, k_matrix, f, factors):
        self.K = k_matrix
        self.f = np.asarray(f, dtype=np.float64).copy()
        self.factors = factors
        self.n = k_matrix.nrows
        self.a = full_solve(factors, self.f)
        self.H = []
        self._hset = set()
        self.k = 0
        self.E = np.zeros((0, 0))
        # memoized forward solves, concatenated CSC-style in factor row space
        self.Vp = np.zeros(1, dtype=np.int64)
        self._vi = np.empty(0, dtype=np.int32)
        self._vx = np.empty(0)
        self._vlen = 0
        # lower triangle of H^T K^{-1} H in insertion order
        self._w_buf = np.zeros((16, 16))
        self.closure_union = np.empty(0, dtype=np.int32)
        self.residual_history = []

    @property
    def m(self):
        return len(self.H)

    @property
    def Vi(self):
        return self._vi[: self._vlen]

    @property
    def Vx(self):
        return self._vx[: self._vlen]

    @property
    def W(self):
        """Lower-triangle view; entries above the diagonal are undefined."""
        return self._w_buf[: self.m, : self.m]

    def w_full(self, positions=None):
        """Symmetrized dense block of the memoized matrix."""
        m = self.m
        w = np.tril(self._w_buf[:m, :m])
        w = w + np.tril(w, -1).T
        if positions is None:
            return w
        return w[np.ix_(positions, positions)]

    def h_positions(self, dofs):
        """Positions of the given original DOFs inside the update set."""
        index = {h: i for i, h in enumerate(self.H)}
        try:
            return np.array([index[int(d)] for d in dofs], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"DOF {e.args[0]} is not memoized; call extend_memo") from None

    def memo_checksums(self):
        """Digest of the memoized columns and W lower triangle; stable
        across extensions by construction."""
        hv = hashlib.sha256()
        hv.update(self.Vp[: self.m + 1].tobytes())
        hv.update(self.Vi.tobytes())
        hv.update(self.Vx.tobytes())
        hw = hashlib.sha256()
        for i in range(self.m):
            hw.update(self._w_buf[i, : i + 1].tobytes())
        return hv.hexdigest(), hw.hexdigest()

    def report(self):
        """Plain-text diagnostic snapshot."""
        lines = [
            "incremental solver state",
            f"  n = {self.n}, m = {self.m}, k = {self.k}",
            f"  |L| = {self.factors.nnz}, closure union = {self.closure_union.shape[0]}",
            f"  memoized V entries = {self._vlen}",
            f"  E shape = {self.E.shape}",
            f"  tracked DOFs (insertion order) = {self.H[:20]}{'...' if self.m > 20 else ''}",
        ]
        if self.residual_history:
            tail = ", ".join(f"{r:.3e}" for r in self.residual_history[-5:])
            lines.append(f"  last residuals: {tail}")
        return "\n".join(lines)

    def _grow_v(self, extra):
        need = self._vlen + extra
        if need > self._vi.shape[0]:
            cap = max(need, 2 * self._vi.shape[0], 1024)
            vi = np.empty(cap, dtype=np.int32)
            vx = np.empty(cap)
            vi[: self._vlen] = self._vi[: self._vlen]
            vx[: self._vlen] = self._vx[: self._vlen]
            self._vi, self._vx = vi, vx

    def _grow_w(self, m_new):
        if m_new > self._w_buf.shape[0]:
            cap = max(m_new, 2 * self._w_buf.shape[0])
            buf = np.zeros((cap, cap))
            m = self.m
            buf[:m, :m] = self._w_buf[:m, :m]
            self._w_buf = buf


def init(k_matrix, f, ordering="amd"):
    """Factor K and solve the pristine system; returns the state all later
    updates build on."""
    if k_matrix.nrows != k_matrix.ncols:
        raise ValueError("K must be square")
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (k_matrix.nrows,):
        raise ValueError("f length mismatch")
    factors = factorize_ldlt(k_matrix, ordering=ordering)
    return AmpsState(k_matrix, f, factors)


def set_load(state, f):
    """Replace the base load and re-solve the pristine system.

    Costs one full solve; keeps the short right-hand-side path available
    for later updates whose loads extend the new f.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (state.n,):
        raise ValueError("f length mismatch")
    state.f = f.copy()
    state.a = full_solve(state.factors, state.f)


def extend_memo(state, new_dofs, timings=None):
    """Memoize forward solves for DOFs joining the update set.

    Appends one sparse column L^{-1} e_h per DOF and the corresponding
    trapezoidal rows of the W lower triangle. Existing columns and the
    leading W block are not touched. New columns and W entries are
    independent and computed in parallel.
    """
    with _Timer(timings, "t_memo_us"):
        new_dofs = np.asarray(new_dofs, dtype=np.int64).ravel()
        if new_dofs.size == 0:
            return
        if np.unique(new_dofs).shape[0] != new_dofs.shape[0]:
            raise ValueError("duplicate DOFs in extension")
        for d in new_dofs:
            if not 0 <= d < state.n:
                raise ValueError(f"DOF {d} out of range")
            if int(d) in state._hset:
                raise ValueError(f"DOF {d} already memoized")
        fac = state.factors
        seeds = fac.iperm[new_dofs].astype(np.int32)
        patterns = [reach_closure(fac.lower(), np.array([s], dtype=np.int32), fac._workspace)
                    for s in seeds]
        sizes = np.array([p.shape[0] for p in patterns], dtype=np.int64)
        local_ptr = np.zeros(new_dofs.shape[0] + 1, dtype=np.int64)
        np.cumsum(sizes, out=local_ptr[1:])
        idx = np.concatenate(patterns) if patterns else np.empty(0, dtype=np.int32)
        vals = np.empty(idx.shape[0])
        _kernels.v_solve_batch(fac.Lp, fac.Li, fac.Lx, fac.n, seeds, local_ptr, idx, vals)

        m_old = state.m
        m_new = m_old + new_dofs.shape[0]
        state._grow_v(idx.shape[0])
        state._vi[state._vlen: state._vlen + idx.shape[0]] = idx
        state._vx[state._vlen: state._vlen + idx.shape[0]] = vals
        state._vlen += idx.shape[0]
        state.Vp = np.concatenate([state.Vp, state.Vp[-1] + local_ptr[1:]])

        state._grow_w(m_new)
        out_ptr = np.zeros(new_dofs.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.arange(m_old, m_new) + 1, out=out_ptr[1:])
        out = np.empty(int(out_ptr[-1]))
        _kernels.w_rows_batch(
            fac.n, fac.d, state.Vp, state.Vi, state.Vx, m_old, m_new, out, out_ptr
        )
        for ii in range(new_dofs.shape[0]):
            i = m_old + ii
            state._w_buf[i, : i + 1] = out[out_ptr[ii]: out_ptr[ii + 1]]

        state.closure_union = np.union1d(state.closure_union, idx).astype(np.int32)
        state.H.extend(int(d) for d in new_dofs)
        state._hset.update(int(d) for d in new_dofs)


def _commit_request(state, request):
    req_dofs = np.asarray(request.new_replaced_dofs, dtype=np.int64).ravel()
    for d in req_dofs:
        if int(d) not in state._hset:
            raise ValueError(f"DOF {d} not memoized; call extend_memo first")
    k = state.k + int(request.new_dof_count)
    m = state.m
    e = np.asarray(request.e, dtype=np.float64)
    if e.shape != (m + k, m + k):
        raise ValueError(f"E has shape {e.shape}, expected {(m + k, m + k)}")
    if e.size:
        scale = max(np.abs(e).max(), 1.0)
        if np.abs(e - e.T).max() > 1e-10 * scale:
            raise ValueError("E must be symmetric")
    f_hat = np.asarray(request.f_hat, dtype=np.float64)
    if f_hat.shape != (state.n + k,):
        raise ValueError(f"f_hat has length {f_hat.shape[0]}, expected {state.n + k}")
    state.k = k
    state.E = e
    return m, k, e, f_hat


def _check_dense_lu(lu_mat, scale):
    diag = np.abs(np.diag(lu_mat))
    if diag.size and diag.min() <= 1e-12 * max(scale, 1e-300):
        raise SingularUpdateError(
            "singular update system; the updates may have disconnected part of the model"
        )


def _lu_solve_refined(lu_piv, mat, rhs):
    """LU solve with two refinement sweeps; the dense systems here can
    carry condition numbers ~ kappa(K) and plain LU loses too much."""
    x = scipy.linalg.lu_solve(lu_piv, rhs, check_finite=False)
    for _ in range(2):
        r = rhs - mat @ x
        x += scipy.linalg.lu_solve(lu_piv, r, check_finite=False)
    return x


def solve_updated(state, request, timings=None, diagnostics=None):
    """Solve the updated system for the requested right-hand side.

    The update set components of the solution come straight from the dense
    solve; the remainder costs one sparse forward+backward pass. When
    ``f_hat`` differs from f on original DOFs, a second full solve handles
    the general right-hand side.
    """
    m, k, e, f_hat = _commit_request(state, request)
    n = state.n
    if m + k == 0:
        if not np.array_equal(f_hat, state.f):
            return full_solve(state.factors, f_hat)
        return state.a.copy()
    h_arr = np.array(state.H, dtype=np.int64)
    fac = state.factors

    with _Timer(timings, "t_rhs_us"):
        plain_rhs = np.array_equal(f_hat[:n], state.f)
        if plain_rhs:
            rhs = np.concatenate([state.a[h_arr], f_hat[n:]])
        else:
            w_vec = full_solve(fac, f_hat[:n])
            rhs = np.concatenate([w_vec[h_arr], f_hat[n:]])

    with _Timer(timings, "t_s2_us"):
        w_sym = state.w_full()
        s2 = np.empty((m + k, m + k))
        s2[:m, :] = -w_sym @ e[:m, :]
        s2[:m, :m] += np.eye(m)
        s2[m:, :] = -e[m:, :]
        lu, piv = scipy.linalg.lu_factor(s2, check_finite=False)
        _check_dense_lu(lu, np.abs(s2).max() if s2.size else 0.0)

    with _Timer(timings, "t_a2_us"):
        a2 = _lu_solve_refined((lu, piv), s2, rhs)

    with _Timer(timings, "t_ahat_us"):
        z = e @ a2
        z[m:] += a2[m:]
        if plain_rhs:
            tail = full_solve_scatter(fac, h_arr, z[:m], state.closure_union)
            base_orig = state.a
        else:
            f_tilde = state.f.copy()
            f_tilde[h_arr] = f_hat[h_arr]
            scat = np.zeros(n)
            scat[h_arr] = z[:m]
            tail = np.zeros(n)
            base_orig = full_solve(fac, f_tilde + scat)
        a_hat = np.empty(n + k)
        a_hat[:n] = base_orig + tail
        a_hat[n:] = f_hat[n:] + z[m:]
        if diagnostics is not None:
            diagnostics["a2"] = a2.copy()
            diagnostics["s2"] = s2
            diagnostics["update_set_alt"] = a_hat[np.concatenate([h_arr, np.arange(n, n + k)])].copy()
        a_hat[h_arr] = a2[:m]
        a_hat[n:] = a2[m:]
    return a_hat


def solve_updated_alt(state, request, timings=None):
    """Same solution through the complementary dense system.

    Requires ``f_hat`` to agree with f on the original DOFs.
    """
    m, k, e, f_hat = _commit_request(state, request)
    n = state.n
    if m + k == 0:
        return state.a.copy()
    if not np.array_equal(f_hat[:n], state.f):
        raise ValueError("alternative path requires f_hat to equal f on original DOFs")
    h_arr = np.array(state.H, dtype=np.int64)
    fac = state.factors

    with _Timer(timings, "t_rhs_us"):
        rhs = np.concatenate([np.zeros(m), f_hat[n:]])
        rhs += e[:, :m] @ state.a[h_arr]

    with _Timer(timings, "t_s2_us"):
        w_sym = state.w_full()
        mat = np.empty((m + k, m + k))
        mat[:, :m] = e[:, :m] @ w_sym
        mat[:, m:] = e[:, m:]
        mat[m:, m:] += np.eye(k)
        mat -= np.eye(m + k)
        lu, piv = scipy.linalg.lu_factor(mat, check_finite=False)
        _check_dense_lu(lu, np.abs(mat).max() if mat.size else 0.0)

    with _Timer(timings, "t_a2_us"):
        a3 = _lu_solve_refined((lu, piv), mat, rhs)

    with _Timer(timings, "t_ahat_us"):
        tail = full_solve_scatter(fac, h_arr, a3[:m], state.closure_union)
        a_hat = np.empty(n + k)
        a_hat[:n] = state.a - tail
        a_hat[n:] = -a3[m:]
    return a_hat


def dirichlet_rhs(k_matrix, f, constrained, prescribed):
    """Right-hand side for imposing prescribed values on the given DOFs.

    Rows outside the constrained set keep f minus the coupling with the
    prescribed values; constrained rows carry only the coupling term.
    """
    constrained = np.asarray(constrained, dtype=np.int64)
    prescribed = np.asarray(prescribed, dtype=np.float64)
    s = np.zeros(k_matrix.ncols)
    s[constrained] = prescribed
    ks = spmv(k_matrix, s)
    f_hat = np.asarray(f, dtype=np.float64) - ks
    f_hat[constrained] = -ks[constrained]
    return f_hat


def impose_dirichlet(state, constrained, prescribed, timings=None):
    """Impose prescribed values on already-memoized DOFs without
    refactoring.

    Solves the saddle system that pins the constrained DOFs, using the
    memoized W block as the reduced operator. Returns ``(a, reactions)``:
    ``a`` is the full-length solution reproducing the prescribed values,
    ``reactions`` the forces the constraints must supply.
    """
    if state.k != 0 or state.E.size:
        raise ValueError("dimension shrinking applies to the unmodified matrix only")
    constrained = np.asarray(constrained, dtype=np.int64).ravel()
    prescribed = np.asarray(prescribed, dtype=np.float64).ravel()
    if constrained.shape != prescribed.shape:
        raise ValueError("constrained and prescribed length mismatch")
    if np.unique(constrained).shape[0] != constrained.shape[0]:
        raise ValueError("duplicate constrained DOFs")
    pos = state.h_positions(constrained)
    fac = state.factors

    with _Timer(timings, "t_rhs_us"):
        f_hat = dirichlet_rhs(state.K, state.f, constrained, prescribed)
        g = f_hat[fac.perm]
        _kernels.forward_full(fac.Lp, fac.Li, fac.Lx, g)
        g /= fac.d
        rhs = _kernels.v_dots(state.Vp, state.Vi, state.Vx, pos.astype(np.int64), g)

    with _Timer(timings, "t_s2_us"):
        w_sub = state.w_full(positions=pos)
        try:
            cho = scipy.linalg.cho_factor(w_sub, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise SingularMatrixError(f"reduced operator not positive definite: {exc}") from exc

    with _Timer(timings, "t_a2_us"):
        a2 = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
        for _ in range(2):
            a2 += scipy.linalg.cho_solve(cho, rhs - w_sub @ a2, check_finite=False)

    with _Timer(timings, "t_ahat_us"):
        t = np.zeros(state.n)
        _kernels.v_scatter_combo(state.Vp, state.Vi, state.Vx, pos.astype(np.int64), a2, t)
        y = g - t / fac.d
        _kernels.backward_full(fac.Lp, fac.Li, fac.Lx, y)
        a = np.empty(state.n)
        a[fac.perm] = y
        # the solve leaves roundoff at the constrained DOFs; pin them exactly
        a[constrained] = prescribed
    reactions = -(a2 + state.f[constrained])
    return a, reactions
