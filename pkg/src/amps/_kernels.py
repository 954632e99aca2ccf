"""Compiled kernels for the sparse hot paths.

All CSC arrays use int64 column pointers and int32 row indices. Kernels are
deterministic: every output element is written by exactly one iteration, so
results do not depend on the thread count.
"""

import os

# Allow requesting more worker threads than detected cores; must be set
# before numba is first imported.
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(4, os.cpu_count() or 1)))

import numpy as np
from numba import njit, prange, set_num_threads, get_num_threads  # noqa: E402

__all__ = [
    "set_num_threads",
    "get_num_threads",
    "spmv_csc",
    "ldl_symbolic",
    "ldl_numeric",
    "forward_full",
    "backward_full",
    "forward_pattern",
    "reach_mark",
    "v_solve_batch",
    "w_rows_batch",
    "v_dots",
    "v_scatter_combo",
    "pcg",
]


@njit(cache=True)
def spmv_csc(col_ptr, row_idx, values, x, y):
    # y += A x, accumulating columns in ascending order and entries within
    # a column in ascending row order.
    for j in range(x.shape[0]):
        xj = x[j]
        if xj != 0.0:
            for p in range(col_ptr[j], col_ptr[j + 1]):
                y[row_idx[p]] += values[p] * xj


@njit(cache=True)
def ldl_symbolic(n, Ap, Ai, parent, counts, flag):
    # Elimination tree and per-column fill counts from the upper triangle.
    for k in range(n):
        parent[k] = -1
        flag[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i >= k:
                break
            while flag[i] != k:
                if parent[i] == -1:
                    parent[i] = k
                counts[i] += 1
                flag[i] = k
                i = parent[i]


@njit(cache=True)
def ldl_numeric(n, Ap, Ai, Ax, parent, Lp, Li, Lx, d, Y, pat, stack, flag, lnz, dtol):
    # Up-looking factorization; row k of L is the sparse triangular solve
    # L[:k,:k] y = A[:k,k] restricted to the elimination-tree reach.
    # Returns -1 on success, else the pivot position that failed.
    for k in range(n):
        top = n
        flag[k] = k
        Y[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i > k:
                break
            Y[i] += Ax[p]
            length = 0
            while flag[i] != k:
                pat[length] = i
                length += 1
                flag[i] = k
                i = parent[i]
            while length > 0:
                length -= 1
                top -= 1
                stack[top] = pat[length]
        dk = Y[k]
        Y[k] = 0.0
        for s in range(top, n):
            i = stack[s]
            yi = Y[i]
            Y[i] = 0.0
            pend = Lp[i] + lnz[i]
            for p in range(Lp[i], pend):
                Y[Li[p]] -= Lx[p] * yi
            lki = yi / d[i]
            dk -= lki * yi
            Li[pend] = k
            Lx[pend] = lki
            lnz[i] += 1
        d[k] = dk
        if abs(dk) <= dtol:
            return k
    return -1


@njit(cache=True)
def forward_full(Lp, Li, Lx, x):
    # x := L^{-1} x with L unit lower triangular (unit diagonal implicit).
    for j in range(x.shape[0]):
        xj = x[j]
        if xj != 0.0:
            for p in range(Lp[j], Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj


@njit(cache=True)
def backward_full(Lp, Li, Lx, x):
    # x := L^{-T} x.
    for j in range(x.shape[0] - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j], Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s


@njit(cache=True)
def forward_pattern(Lp, Li, Lx, pattern, x):
    # Forward solve driven by a precomputed nonzero pattern (ascending,
    # closed under reachability). Touches only the pattern columns.
    for q in range(pattern.shape[0]):
        j = pattern[q]
        xj = x[j]
        if xj != 0.0:
            for p in range(Lp[j], Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj


@njit(cache=True)
def reach_mark(col_ptr, row_idx, seeds, marks, gen, stack, out):
    # Flood fill over edges j -> i present when A[i,j] != 0 with i > j.
    # marks is generation-stamped so it is reused across calls unreset.
    cnt = 0
    sp = 0
    for q in range(seeds.shape[0]):
        s = seeds[q]
        if marks[s] != gen:
            marks[s] = gen
            stack[sp] = s
            sp += 1
            while sp > 0:
                sp -= 1
                j = stack[sp]
                out[cnt] = j
                cnt += 1
                for p in range(col_ptr[j], col_ptr[j + 1]):
                    i = row_idx[p]
                    if i > j and marks[i] != gen:
                        marks[i] = gen
                        stack[sp] = i
                        sp += 1
    return cnt


@njit(cache=True, parallel=True)
def v_solve_batch(Lp, Li, Lx, n, seeds, vp_ptr, vp_idx, out_vals):
    # Numeric forward solves L v = e_seed for a batch of columns whose
    # patterns were computed beforehand. Columns are independent.
    ncols = seeds.shape[0]
    for c in prange(ncols):
        x = np.zeros(n)
        x[seeds[c]] = 1.0
        for q in range(vp_ptr[c], vp_ptr[c + 1]):
            j = vp_idx[q]
            xj = x[j]
            if xj != 0.0:
                for p in range(Lp[j], Lp[j + 1]):
                    x[Li[p]] -= Lx[p] * xj
        for q in range(vp_ptr[c], vp_ptr[c + 1]):
            out_vals[q] = x[vp_idx[q]]


@njit(cache=True, parallel=True)
def w_rows_batch(n, d, Vp, Vi, Vx, m_old, m_new, out, out_ptr):
    # Trapezoidal extension rows W[i, :i+1] for i in [m_old, m_new).
    # W[i, j] = V_i^T D^{-1} V_j. Each output entry is written once.
    for ii in prange(m_new - m_old):
        i = m_old + ii
        scratch = np.zeros(n)
        for p in range(Vp[i], Vp[i + 1]):
            r = Vi[p]
            scratch[r] = Vx[p] / d[r]
        base = out_ptr[ii]
        for j in range(i + 1):
            s = 0.0
            for p in range(Vp[j], Vp[j + 1]):
                s += Vx[p] * scratch[Vi[p]]
            out[base + j] = s


@njit(cache=True)
def v_dots(Vp, Vi, Vx, cols, g):
    # out[j] = V[:, cols[j]]^T g
    out = np.empty(cols.shape[0])
    for j in range(cols.shape[0]):
        c = cols[j]
        s = 0.0
        for p in range(Vp[c], Vp[c + 1]):
            s += Vx[p] * g[Vi[p]]
        out[j] = s
    return out


@njit(cache=True)
def v_scatter_combo(Vp, Vi, Vx, cols, coeffs, t):
    # t += sum_j coeffs[j] * V[:, cols[j]]
    for j in range(cols.shape[0]):
        c = cols[j]
        a = coeffs[j]
        if a != 0.0:
            for p in range(Vp[c], Vp[c + 1]):
                t[Vi[p]] += Vx[p] * a


@njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True)
def pcg(col_ptr, row_idx, values, b, inv_diag, abs_tol, maxiter):
    # Preconditioned conjugate gradients. The stopping test fires on the
    # recurrence residual and is then confirmed against the true residual;
    # on drift the recurrence is restarted from the true residual.
    n = b.shape[0]
    x = np.zeros(n)
    r = b.copy()
    if np.sqrt(_dot(r, r)) <= abs_tol:
        return x, 0, True
    z = r * inv_diag
    p = z.copy()
    rz = _dot(r, z)
    it = 0
    while it < maxiter:
        ap = np.zeros(n)
        spmv_csc(col_ptr, row_idx, values, p, ap)
        pap = _dot(p, ap)
        if pap <= 0.0:
            return x, it, False
        alpha = rz / pap
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * ap[i]
        it += 1
        if np.sqrt(_dot(r, r)) <= abs_tol:
            rt = b.copy()
            tmp = np.zeros(n)
            spmv_csc(col_ptr, row_idx, values, x, tmp)
            for i in range(n):
                rt[i] -= tmp[i]
            if np.sqrt(_dot(rt, rt)) <= abs_tol:
                return x, it, True
            r = rt
        z = r * inv_diag
        rz_new = _dot(r, z)
        if rz_new == 0.0:
            return x, it, False
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
    return x, maxiter, False
