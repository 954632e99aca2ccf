"""Structured test meshes, scripted planar cuts, and the benchmark harness.

Meshes are tetrahedralized grids. A cut advances node by node along a plane:
each step duplicates one node and reconnects the elements strictly on the
positive side of the plane to the duplicate, which grows the system by the
three DOFs of the new node and perturbs the stiffness rows of the duplicated
node and its reconnected neighbors.

run_script drives a solver through a list of actions and records per-step
timings and residuals in the shape the CSV writers expect.
"""

import csv
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph

from . import engine
from .baselines import cg_solve, refactorize_solve
from .engine import UpdateRequest
from .errors import SingularMatrixError, SingularUpdateError
from .fem import Material, Mesh, assemble_stiffness, build_dofmap, local_stiffness_diff
from .sparse import SparseMatrix, spmv

__all__ = [
    "CutPlane",
    "Constrain",
    "Force",
    "CutEvent",
    "ScriptError",
    "StepRecord",
    "RunResult",
    "generate_beam",
    "generate_brick",
    "count_components",
    "cut_front",
    "advance_cut",
    "parse_script",
    "format_script",
    "load_script",
    "save_script",
    "default_script",
    "default_load",
    "run_script",
    "write_records_csv",
    "write_breakdown_csv",
    "summary_line",
]

# one cube -> 6 positively oriented tets around the main diagonal, as bit
# masks (dx, dy, dz) of the cube corners
_KUHN = np.array(
    [
        [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)],
        [(0, 0, 0), (1, 1, 0), (0, 1, 0), (1, 1, 1)],
        [(0, 0, 0), (0, 1, 0), (0, 1, 1), (1, 1, 1)],
        [(0, 0, 0), (0, 1, 1), (0, 0, 1), (1, 1, 1)],
        [(0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1)],
        [(0, 0, 0), (1, 0, 1), (1, 0, 0), (1, 1, 1)],
    ],
    dtype=np.int64,
)


def _grid_mesh(cells, spacing, anchor_z0=True):
    """Tetrahedral mesh of a box of cells[0] x cells[1] x cells[2] cubes.

    Vertex ids run x-fastest, z-slowest. Every cube is split into the same
    six tets, which keeps shared faces conforming and volumes positive.
    With ``anchor_z0`` all DOFs of the z = 0 face are constrained.
    """
    nx, ny, nz = cells
    sx, sy = nx + 1, ny + 1
    xs = np.arange(nx + 1) * spacing[0]
    ys = np.arange(ny + 1) * spacing[1]
    zs = np.arange(nz + 1) * spacing[2]
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    coords = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = (ix + iy * sx + iz * sx * sy).ravel()
    corner = _KUHN[:, :, 0] + _KUHN[:, :, 1] * sx + _KUHN[:, :, 2] * sx * sy
    tets = (base[:, None, None] + corner[None, :, :]).reshape(-1, 4).astype(np.int32)

    if anchor_z0:
        fixed = np.nonzero(coords[:, 2] == 0.0)[0]
        dirichlet = (3 * fixed[:, None] + np.arange(3)[None, :]).ravel().astype(np.int64)
    else:
        dirichlet = np.empty(0, dtype=np.int64)
    mesh = Mesh(coords=coords, tets=tets, dirichlet=dirichlet)
    mesh.validate()
    return mesh


def generate_beam(h):
    """Beam on a 5 x 5 x h vertex grid, unit cells, anchored at z = 0.

    h is the number of vertex layers along the beam, so the mesh has 25 h
    vertices and 75 (h - 1) free DOFs.
    """
    if h < 2:
        raise ValueError("beam needs at least 2 vertex layers")
    return _grid_mesh((4, 4, h - 1), (1.0, 1.0, 1.0))


def generate_brick(level):
    """Brick filling a 1 x 1 x 2 box, anchored at z = 0.

    Refinement level L uses 4 (L + 1) cells per unit edge; level 0 has 225
    vertices and level 4 has 18,081.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    c = 4 * (int(level) + 1)
    s = 1.0 / c
    return _grid_mesh((c, c, 2 * c), (s, s, s))


def count_components(mesh):
    """Connected components of the element-sharing vertex graph. Vertices
    in no element count as their own component."""
    t = mesh.tets
    pairs_i = t[:, [0, 0, 0, 1, 1, 2]].ravel()
    pairs_j = t[:, [1, 2, 3, 2, 3, 3]].ravel()
    nv = mesh.n_vertices
    g = scipy.sparse.coo_matrix(
        (np.ones(pairs_i.shape[0]), (pairs_i, pairs_j)), shape=(nv, nv)
    )
    ncomp, _ = scipy.sparse.csgraph.connected_components(g, directed=False)
    return int(ncomp)


class ScriptError(RuntimeError):
    """Solver failure while executing a script; carries the step index."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class CutPlane:
    """Planar cut n . x = offset advanced over ``steps`` front nodes (all of
    them when None). The normal need not be unit length."""

    normal: tuple
    offset: float
    steps: int = None


@dataclass
class Constrain:
    """Prescribe the three displacement components of one vertex."""

    vertex: int
    values: tuple


@dataclass
class Force:
    """Add a point load at one vertex."""

    vertex: int
    values: tuple


@dataclass
class CutEvent:
    """Outcome of one cut step.

    ``new_vertex`` is None when the step was a no-op (constrained node, or a
    node whose elements all sit on one side of the plane). ``h_delta`` holds
    the free DOFs of the duplicated node and its reconnected neighbors that
    were not already tracked; ``k_delta`` is 3 per duplicated node.
    """

    step: int
    duplicated_vertex: int
    new_vertex: int
    affected_elements: np.ndarray
    h_delta: np.ndarray
    k_delta: int


def _plane_tol(mesh):
    span = mesh.coords.max(axis=0) - mesh.coords.min(axis=0)
    return 1e-7 * max(float(np.linalg.norm(span)), 1.0)


def cut_front(mesh, plane):
    """Nodes on the plane, ordered top-down (descending z, then y, x).

    Includes constrained nodes; advance_cut skips those with a warning so
    scripted cuts keep a stable step count.
    """
    normal = np.asarray(plane.normal, dtype=np.float64)
    tol = _plane_tol(mesh)
    side = mesh.coords @ normal - plane.offset
    on_plane = np.nonzero(np.abs(side) <= tol)[0]
    if on_plane.size == 0:
        raise ValueError("cut plane misses the mesh")
    c = mesh.coords[on_plane]
    order = np.lexsort((c[:, 0], c[:, 1], -c[:, 2]))
    return on_plane[order].astype(np.int64)


def advance_cut(mesh, plane, t, front=None, h_prior=(), dofmap=None):
    """Duplicate the t-th front node and reconnect its positive-side
    elements to the duplicate. The mesh is modified in place and returned.

    Elements with vertices strictly on both sides of the plane are an
    error: node-snapped cuts require the plane to follow element faces.
    """
    if front is None:
        front = cut_front(mesh, plane)
    vertex = int(front[t])
    noop = CutEvent(
        step=int(t),
        duplicated_vertex=vertex,
        new_vertex=None,
        affected_elements=np.empty(0, dtype=np.int64),
        h_delta=np.empty(0, dtype=np.int64),
        k_delta=0,
    )
    raw = 3 * vertex + np.arange(3)
    if np.isin(raw, mesh.dirichlet).any():
        warnings.warn(f"cut reached constrained node {vertex}; skipping", stacklevel=2)
        return mesh, noop

    normal = np.asarray(plane.normal, dtype=np.float64)
    tol = _plane_tol(mesh)
    incident = np.nonzero((mesh.tets == vertex).any(axis=1))[0]
    side = mesh.coords[mesh.tets[incident]] @ normal - plane.offset
    has_pos = (side > tol).any(axis=1)
    has_neg = (side < -tol).any(axis=1)
    if (has_pos & has_neg).any():
        bad = incident[has_pos & has_neg]
        raise ValueError(f"elements {bad.tolist()} straddle the cut plane")
    affected = incident[has_pos]
    if affected.size == 0 or affected.size == incident.size:
        # nothing to separate at this node
        return mesh, noop

    if dofmap is None:
        dofmap = build_dofmap(mesh)
    touched_vertices = np.unique(mesh.tets[affected])
    touched_raw = (3 * touched_vertices[:, None] + np.arange(3)[None, :]).ravel()
    touched = dofmap.dof_of_raw[touched_raw]
    touched = touched[touched >= 0].astype(np.int64)
    h_prior = set(int(d) for d in h_prior)
    h_delta = np.array(sorted(set(touched.tolist()) - h_prior), dtype=np.int64)

    new_vertex = mesh.n_vertices
    mesh.coords = np.vstack([mesh.coords, mesh.coords[vertex][None, :]])
    sub = mesh.tets[affected]
    sub[sub == vertex] = new_vertex
    mesh.tets[affected] = sub
    return mesh, CutEvent(
        step=int(t),
        duplicated_vertex=vertex,
        new_vertex=int(new_vertex),
        affected_elements=affected.astype(np.int64),
        h_delta=h_delta,
        k_delta=3,
    )


def parse_script(text):
    """Parse the line-oriented script format.

    ``cut plane nx ny nz d steps S``, ``constrain v ux uy uz``,
    ``force v fx fy fz``. Blank lines and # comments are skipped.
    """
    actions = []
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        try:
            if parts[0] == "cut":
                if parts[1] != "plane" or parts[6] != "steps" or len(parts) != 8:
                    raise ValueError
                actions.append(
                    CutPlane(
                        normal=(float(parts[2]), float(parts[3]), float(parts[4])),
                        offset=float(parts[5]),
                        steps=int(parts[7]),
                    )
                )
            elif parts[0] == "constrain" and len(parts) == 5:
                actions.append(
                    Constrain(int(parts[1]), (float(parts[2]), float(parts[3]), float(parts[4])))
                )
            elif parts[0] == "force" and len(parts) == 5:
                actions.append(
                    Force(int(parts[1]), (float(parts[2]), float(parts[3]), float(parts[4])))
                )
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise ValueError(f"bad script line {ln}: {line!r}") from None
    return actions


def format_script(actions):
    lines = []
    for a in actions:
        if isinstance(a, CutPlane):
            n = a.normal
            steps = a.steps if a.steps is not None else 0
            lines.append(f"cut plane {n[0]:.17g} {n[1]:.17g} {n[2]:.17g} {a.offset:.17g} steps {steps}")
        elif isinstance(a, Constrain):
            v = a.values
            lines.append(f"constrain {a.vertex} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        elif isinstance(a, Force):
            v = a.values
            lines.append(f"force {a.vertex} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        else:
            raise TypeError(f"unknown action {a!r}")
    return "\n".join(lines) + "\n"


def load_script(path):
    with open(path) as fh:
        return parse_script(fh.read())


def save_script(actions, path):
    with open(path, "w") as fh:
        fh.write(format_script(actions))


_DEFORM_VALUES = (0.01, 0.005, -0.0025)


def default_script(mesh, experiment, steps=None):
    """Built-in protocols.

    deform: progressively prescribe a fixed nonzero displacement on free
    vertices starting from the free end (50 by default). cut: advance a
    mid-plane cut with normal x over the whole front (or ``steps`` nodes).
    """
    if experiment == "deform":
        free_raw = np.ones(3 * mesh.n_vertices, dtype=bool)
        free_raw[mesh.dirichlet] = False
        all_free = free_raw.reshape(-1, 3).all(axis=1)
        cand = np.nonzero(all_free)[0]
        c = mesh.coords[cand]
        order = np.lexsort((c[:, 0], c[:, 1], -c[:, 2]))
        cand = cand[order]
        count = min(steps if steps is not None else 50, cand.shape[0])
        return [Constrain(int(v), _DEFORM_VALUES) for v in cand[:count]]
    if experiment == "cut":
        lo = mesh.coords[:, 0].min()
        hi = mesh.coords[:, 0].max()
        plane = CutPlane(normal=(1.0, 0.0, 0.0), offset=(lo + hi) / 2.0, steps=steps)
        if steps is None:
            plane.steps = int(cut_front(mesh, plane).shape[0])
        return [plane]
    raise ValueError(f"unknown experiment {experiment!r}")


def default_load(dofmap, magnitude=1.0):
    """Uniform load along -z on every free vertex."""
    f = np.zeros(dofmap.n)
    f[dofmap.axis_of_dof == 2] = -magnitude
    return f


@dataclass
class StepRecord:
    step: int
    n: int
    m: int
    k: int
    t_memo_us: float = 0.0
    t_s2_us: float = 0.0
    t_rhs_us: float = 0.0
    t_a2_us: float = 0.0
    t_ahat_us: float = 0.0
    t_total_us: float = 0.0
    rel_residual: float = 0.0
    inf_diff_vs_oracle: float = None
    t_oracle_us: float = None
    cg_iterations: int = None
    cg_converged: bool = None
    reactions: np.ndarray = None


@dataclass
class RunResult:
    records: list
    summary: dict
    solutions: list
    mesh: Mesh
    state: object = None


_CSV_COLUMNS = [
    "step", "n", "m", "k",
    "t_memo_us", "t_s2_us", "t_rhs_us", "t_a2_us", "t_ahat_us", "t_total_us",
    "rel_residual",
]
_BREAKDOWN_KEYS = ["t_memo_us", "t_s2_us", "t_rhs_us", "t_a2_us", "t_ahat_us"]


def write_records_csv(records, path):
    """Per-step table; a compare column is appended when any record has one."""
    with_diff = any(r.inf_diff_vs_oracle is not None for r in records)
    cols = _CSV_COLUMNS + (["inf_diff_vs_oracle"] if with_diff else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            row = [r.step, r.n, r.m, r.k]
            row += [f"{getattr(r, c):.3f}" for c in _BREAKDOWN_KEYS + ["t_total_us"]]
            row.append(f"{r.rel_residual:.9e}")
            if with_diff:
                d = r.inf_diff_vs_oracle
                row.append("" if d is None else f"{d:.9e}")
            w.writerow(row)


def write_breakdown_csv(records, path):
    """Per-step share of the five solver phases (fractions of their sum)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "memo_share", "s2_share", "rhs_share", "a2_share", "ahat_share"])
        for r in records:
            parts = [getattr(r, key) for key in _BREAKDOWN_KEYS]
            total = sum(parts)
            shares = [p / total if total > 0 else 0.0 for p in parts]
            w.writerow([r.step] + [f"{s:.6f}" for s in shares])


def summary_line(summary):
    bits = [
        f"solver={summary['solver']}",
        f"steps={summary['steps']}",
        f"n_final={summary['n_final']}",
        f"m_final={summary['m_final']}",
        f"k_final={summary['k_final']}",
        f"t_total_us mean={summary['t_total_mean_us']:.1f}"
        f" min={summary['t_total_min_us']:.1f} max={summary['t_total_max_us']:.1f}",
        f"worst_residual={summary['worst_residual']:.3e}",
    ]
    if summary.get("geomean_speedup_vs_oracle") is not None:
        bits.append(f"geomean_speedup_vs_oracle={summary['geomean_speedup_vs_oracle']:.2f}")
    if summary.get("threads") is not None:
        bits.append(f"threads={summary['threads']}")
    return " ".join(bits)


def _update_residual(k0, h_list, e, a_hat, f_hat):
    """Relative residual of the updated system, evaluated against the
    original matrix plus the dense update (no reassembly)."""
    n = k0.nrows
    m = len(h_list)
    k = a_hat.shape[0] - n
    h_arr = np.array(h_list, dtype=np.int64)
    u = np.concatenate([a_hat[h_arr], a_hat[n:]])
    eu = e @ u if e.size else np.zeros(m + k)
    eu[m:] += u[m:]
    r = np.empty(n + k)
    r[:n] = spmv(k0, a_hat[:n]) - f_hat[:n]
    r[:n][h_arr] -= eu[:m]
    r[n:] = a_hat[n:] - eu[m:] - f_hat[n:]
    denom = np.linalg.norm(f_hat)
    if denom == 0.0:
        return float(np.linalg.norm(r))
    return float(np.linalg.norm(r) / denom)


def _reduced_system(k0_scipy, f_hat, still_free):
    sub = k0_scipy[still_free][:, still_free].tocsc()
    return SparseMatrix.from_scipy(sub), f_hat[still_free]


class _ScriptRun:
    """One pass of a script with one solver; see run_script."""

    def __init__(self, mesh0, actions, solver, material, general_forces,
                 cg_rel_tol, compare_oracle, cut_force_mag, ordering, base_load):
        self.mesh0 = mesh0
        self.actions = actions
        self.solver = solver
        self.material = material
        self.general_forces = general_forces
        self.cg_rel_tol = cg_rel_tol
        self.compare_oracle = compare_oracle or solver == "oracle"
        self.cut_force_mag = cut_force_mag
        self.ordering = ordering
        self.base_load = base_load

    def run(self):
        mesh0 = self.mesh0
        work = mesh0.copy()
        k0, dm = assemble_stiffness(mesh0, self.material)
        n0 = k0.nrows
        f0 = default_load(dm) if self.base_load is None else np.asarray(self.base_load, dtype=np.float64).copy()
        if f0.shape != (n0,):
            raise ValueError("base load length mismatch")
        uses_state = self.solver in ("amps", "amps-alt")
        state = engine.init(k0, f0, ordering=self.ordering) if uses_state else None
        k0_scipy = k0.to_scipy() if (self.solver in ("cg", "oracle") or self.compare_oracle) else None

        h_list = []
        h_set = set()
        f_cur = f0.copy()
        affected_union = np.empty(0, dtype=np.int64)
        dup_count = 0
        constrained = []
        prescribed = []
        records = []
        solutions = []
        self.had_cut = False
        self.had_constrain = False
        step_idx = 0

        for action in self.actions:
            if isinstance(action, Force):
                self._apply_force(action, work, dm, n0, f_cur, state, uses_state)
                continue
            if isinstance(action, Constrain):
                if self.had_cut:
                    raise ValueError("constrain after cut is not supported in one script")
                self.had_constrain = True
                try:
                    rec, a_full = self._constrain_step(
                        step_idx, action, k0, k0_scipy, dm, n0, f_cur, state,
                        h_list, h_set, constrained, prescribed)
                except (SingularMatrixError, SingularUpdateError, np.linalg.LinAlgError) as exc:
                    raise ScriptError(step_idx, exc) from exc
                records.append(rec)
                solutions.append(a_full)
                step_idx += 1
                continue
            if isinstance(action, CutPlane):
                if self.had_constrain:
                    raise ValueError("cut after constrain is not supported in one script")
                self.had_cut = True
                front = cut_front(work, action)
                steps = action.steps if action.steps is not None else front.shape[0]
                if steps > front.shape[0]:
                    raise ValueError(f"cut asks for {steps} steps, front has {front.shape[0]}")
                khat_cache = [None]
                for t in range(steps):
                    try:
                        rec, a_hat, affected_union, dup_count = self._cut_step(
                            step_idx, action, t, front, work, k0, dm, n0, f_cur,
                            state, h_list, h_set, affected_union, dup_count, khat_cache)
                    except (SingularMatrixError, SingularUpdateError, np.linalg.LinAlgError) as exc:
                        raise ScriptError(step_idx, exc) from exc
                    records.append(rec)
                    solutions.append(a_hat)
                    # forces on new DOFs extend the load vector permanently
                    f_cur = self.f_cur_next
                    step_idx += 1
                continue
            raise TypeError(f"unknown action {action!r}")
        return records, solutions, work, state

    def _vertex_dofs(self, vertex, work, dm, n0):
        n0v = self.mesh0.n_vertices
        if vertex < n0v:
            d = dm.dofs_of_vertex(vertex)
            if d.shape[0] != 3:
                raise ValueError(f"vertex {vertex} has constrained DOFs")
            return d.astype(np.int64)
        if work is None or vertex >= work.n_vertices:
            raise ValueError(f"vertex {vertex} does not exist yet")
        return n0 + 3 * (vertex - n0v) + np.arange(3)

    def _apply_force(self, action, work, dm, n0, f_cur, state, uses_state):
        dofs = self._vertex_dofs(action.vertex, work, dm, n0)
        f_cur[dofs] += np.asarray(action.values, dtype=np.float64)
        # loads on original DOFs shift the reference solution the short
        # path builds on; new-DOF loads ride in the extended tail
        if uses_state and dofs.min() < n0:
            engine.set_load(state, f_cur[:n0])

    def _constrain_step(self, step_idx, action, k0, k0_scipy, dm, n0, f_cur,
                        state, h_list, h_set, constrained, prescribed):
        dofs = self._vertex_dofs(action.vertex, None, dm, n0)
        for d in dofs:
            if int(d) in set(constrained):
                raise ValueError(f"vertex {action.vertex} constrained twice")
        timings = {}
        t0 = time.perf_counter_ns()
        if state is not None:
            engine.extend_memo(state, dofs, timings)
        h_list.extend(int(d) for d in dofs)
        h_set.update(int(d) for d in dofs)
        constrained.extend(int(d) for d in dofs)
        prescribed.extend(float(v) for v in action.values)
        c_arr = np.array(constrained, dtype=np.int64)
        p_arr = np.array(prescribed)

        reactions = None
        cg_iters = cg_conv = None
        if state is not None:
            a_full, reactions = engine.impose_dirichlet(state, c_arr, p_arr, timings)
            t_solve = sum(timings.values())
        else:
            f_hat = engine.dirichlet_rhs(k0, f_cur, c_arr, p_arr)
            still_free = np.setdiff1d(np.arange(n0), c_arr)
            k_red, f_red = _reduced_system(k0_scipy, f_hat, still_free)
            ts = time.perf_counter_ns()
            if self.solver == "oracle":
                x = refactorize_solve(k_red, f_red)
            else:
                x, rep = cg_solve(k_red, f_red, self._cg_abs_tol(f_red))
                cg_iters, cg_conv = rep.iterations, rep.converged
            t_solve = (time.perf_counter_ns() - ts) / 1000.0
            a_full = np.zeros(n0)
            a_full[still_free] = x
            a_full[c_arr] = p_arr

        rec = StepRecord(
            step=step_idx, n=n0 - c_arr.shape[0], m=len(h_list), k=0,
            t_memo_us=timings.get("t_memo_us", 0.0),
            t_s2_us=timings.get("t_s2_us", 0.0),
            t_rhs_us=timings.get("t_rhs_us", 0.0),
            t_a2_us=timings.get("t_a2_us", 0.0),
            t_ahat_us=timings.get("t_ahat_us", 0.0),
            t_total_us=t_solve,
            rel_residual=self._dirichlet_residual(k0, f_cur, c_arr, p_arr, a_full),
            cg_iterations=cg_iters, cg_converged=cg_conv, reactions=reactions,
        )
        if self.compare_oracle and self.solver != "oracle":
            f_hat = engine.dirichlet_rhs(k0, f_cur, c_arr, p_arr)
            still_free = np.setdiff1d(np.arange(n0), c_arr)
            k_red, f_red = _reduced_system(k0_scipy, f_hat, still_free)
            ts = time.perf_counter_ns()
            x = refactorize_solve(k_red, f_red)
            rec.t_oracle_us = (time.perf_counter_ns() - ts) / 1000.0
            ref = np.zeros(n0)
            ref[still_free] = x
            ref[c_arr] = p_arr
            rec.inf_diff_vs_oracle = _rel_inf_diff(a_full, ref)
        return rec, a_full

    @staticmethod
    def _dirichlet_residual(k0, f_cur, c_arr, p_arr, a_full):
        f_hat = engine.dirichlet_rhs(k0, f_cur, c_arr, p_arr)
        r = spmv(k0, a_full) - f_cur
        still_free = np.setdiff1d(np.arange(k0.nrows), c_arr)
        denom = np.linalg.norm(f_hat[still_free])
        num = np.linalg.norm(r[still_free])
        return float(num / denom) if denom > 0 else float(num)

    def _cg_abs_tol(self, f):
        norm = np.linalg.norm(f)
        return self.cg_rel_tol * norm if norm > 0 else self.cg_rel_tol

    def _cut_step(self, step_idx, plane, t, front, work, k0, dm, n0, f_cur,
                  state, h_list, h_set, affected_union, dup_count, khat_cache):
        timings = {}
        dm_work = build_dofmap(work)
        prior = h_set | set(range(n0, n0 + 3 * dup_count))
        work, ev = advance_cut(work, plane, t, front=front, h_prior=prior, dofmap=dm_work)
        normal = np.asarray(plane.normal, dtype=np.float64)
        normal = normal / np.linalg.norm(normal)

        f_next = f_cur
        if ev.new_vertex is not None:
            dup_count += 1
            affected_union = np.union1d(affected_union, ev.affected_elements)
            if state is not None:
                engine.extend_memo(state, ev.h_delta, timings)
            h_list.extend(int(d) for d in ev.h_delta)
            h_set.update(int(d) for d in ev.h_delta)
            f_next = np.concatenate([f_cur, self.cut_force_mag * normal])
            if self.general_forces:
                orig = self._vertex_dofs(ev.duplicated_vertex, work, dm, n0)
                f_next[orig] -= self.cut_force_mag * normal
        self.f_cur_next = f_next

        cg_iters = cg_conv = None
        e_upd = None
        if state is not None:
            h_extra, k_emit, e_upd = local_stiffness_diff(
                self.mesh0, work, affected_union, h_prior=h_list, material=self.material)
            if h_extra.size:
                raise AssertionError(f"diff touched unmemoized DOFs {h_extra.tolist()}")
            if k_emit != 3 * dup_count:
                raise AssertionError("new DOF accounting mismatch")
            req = UpdateRequest(ev.h_delta, ev.k_delta, e_upd, f_next)
            if self.solver == "amps":
                a_hat = engine.solve_updated(state, req, timings)
            else:
                a_hat = engine.solve_updated_alt(state, req, timings)
            t_total = sum(timings.values())
        else:
            if ev.new_vertex is not None or khat_cache[0] is None:
                khat_cache[0] = assemble_stiffness(work, self.material)[0]
            k_hat = khat_cache[0]
            ts = time.perf_counter_ns()
            if self.solver == "oracle":
                a_hat = refactorize_solve(k_hat, f_next)
            else:
                a_hat, rep = cg_solve(k_hat, f_next, self._cg_abs_tol(f_next))
                cg_iters, cg_conv = rep.iterations, rep.converged
            t_total = (time.perf_counter_ns() - ts) / 1000.0

        if e_upd is not None:
            resid = _update_residual(k0, h_list, e_upd, a_hat, f_next)
        else:
            k_hat = khat_cache[0]
            r = spmv(k_hat, a_hat) - f_next
            denom = np.linalg.norm(f_next)
            resid = float(np.linalg.norm(r) / denom) if denom > 0 else float(np.linalg.norm(r))

        rec = StepRecord(
            step=step_idx, n=n0 + 3 * dup_count, m=len(h_list), k=3 * dup_count,
            t_memo_us=timings.get("t_memo_us", 0.0),
            t_s2_us=timings.get("t_s2_us", 0.0),
            t_rhs_us=timings.get("t_rhs_us", 0.0),
            t_a2_us=timings.get("t_a2_us", 0.0),
            t_ahat_us=timings.get("t_ahat_us", 0.0),
            t_total_us=t_total, rel_residual=resid,
            cg_iterations=cg_iters, cg_converged=cg_conv,
        )
        if self.compare_oracle and self.solver != "oracle":
            if ev.new_vertex is not None or khat_cache[0] is None:
                khat_cache[0] = assemble_stiffness(work, self.material)[0]
            ts = time.perf_counter_ns()
            ref = refactorize_solve(khat_cache[0], f_next)
            rec.t_oracle_us = (time.perf_counter_ns() - ts) / 1000.0
            rec.inf_diff_vs_oracle = _rel_inf_diff(a_hat, ref)
        return rec, a_hat, affected_union, dup_count


def _rel_inf_diff(x, ref):
    scale = float(np.abs(ref).max())
    diff = float(np.abs(x - ref).max())
    return diff / scale if scale > 0 else diff


def run_script(mesh, actions, solver="amps", reps=1, material=Material(),
               general_forces=False, cg_rel_tol=1e-10, compare_oracle=False,
               threads=None, cut_force_mag=1.0, ordering="amd", base_load=None):
    """Execute a script and collect per-step records.

    The input mesh is not modified. With ``reps`` > 1 the script runs that
    many times and the first run is excluded from the averaged timings as
    JIT and cache warm-up; n, m, k, residuals and solutions come from the
    last run. Cut and constrain actions cannot be mixed in one script.
    """
    if solver not in ("amps", "amps-alt", "cg", "oracle"):
        raise ValueError(f"unknown solver {solver!r}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if threads is not None:
        engine.set_threads(threads)
    runs = []
    for _ in range(reps):
        r = _ScriptRun(mesh, actions, solver, material, general_forces,
                       cg_rel_tol, compare_oracle, cut_force_mag, ordering, base_load)
        runs.append(r.run())
    timed = runs[1:] if reps > 1 else runs
    records, solutions, final_mesh, state = runs[-1]

    for i, rec in enumerate(records):
        for key in _BREAKDOWN_KEYS + ["t_total_us"]:
            setattr(rec, key, float(np.mean([getattr(run[0][i], key) for run in timed])))
        if rec.t_oracle_us is not None:
            rec.t_oracle_us = float(np.mean([run[0][i].t_oracle_us for run in timed]))

    totals = [r.t_total_us for r in records]
    summary = {
        "solver": solver,
        "steps": len(records),
        "reps": reps,
        "n_final": records[-1].n if records else None,
        "m_final": records[-1].m if records else 0,
        "k_final": records[-1].k if records else 0,
        "t_total_mean_us": float(np.mean(totals)) if totals else 0.0,
        "t_total_min_us": float(np.min(totals)) if totals else 0.0,
        "t_total_max_us": float(np.max(totals)) if totals else 0.0,
        "worst_residual": float(np.max([r.rel_residual for r in records])) if records else 0.0,
        "geomean_speedup_vs_oracle": None,
        "threads": engine.get_threads(),
    }
    ratios = [r.t_oracle_us / r.t_total_us for r in records
              if r.t_oracle_us is not None and r.t_total_us > 0]
    if ratios:
        summary["geomean_speedup_vs_oracle"] = float(math.exp(np.mean(np.log(ratios))))
    return RunResult(records=records, summary=summary, solutions=solutions,
                     mesh=final_mesh, state=state)
