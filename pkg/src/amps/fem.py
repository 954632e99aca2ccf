"""Linear elasticity on tetrahedral meshes.

4-node constant-strain tetrahedra, isotropic material. Degrees of freedom are
numbered vertex-major, axis-minor (x, y, z), skipping constrained DOFs, so a
mesh with V vertices and a constraint set of size D yields n = 3V - D
unknowns. Vertices appended later get the trailing DOF ids.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateElementError
from .sparse import SparseMatrix

__all__ = [
    "Material",
    "Mesh",
    "DofMap",
    "build_dofmap",
    "elastic_moduli",
    "element_stiffness",
    "assemble_stiffness",
    "local_stiffness_diff",
    "save_mesh",
    "load_mesh",
]


@dataclass(frozen=True)
class Material:
    """Isotropic linear elastic material."""

    young: float = 1.0e5
    poisson: float = 0.3


@dataclass
class Mesh:
    """Tetrahedral mesh with homogeneous Dirichlet DOFs.

    ``dirichlet`` lists constrained raw DOF ids (3 * vertex + axis),
    sorted ascending.
    """

    coords: np.ndarray
    tets: np.ndarray
    dirichlet: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int32)
        self.dirichlet = np.unique(np.asarray(self.dirichlet, dtype=np.int64))
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError("coords must be (V, 3)")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise ValueError("tets must be (T, 4)")

    @property
    def n_vertices(self):
        return self.coords.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    @property
    def n_free(self):
        return 3 * self.n_vertices - self.dirichlet.shape[0]

    def validate(self):
        if self.n_tets:
            if self.tets.min() < 0 or self.tets.max() >= self.n_vertices:
                raise ValueError("tet vertex id out of range")
            vol = _volumes(self.coords, self.tets)
            bad = np.nonzero(vol <= 0.0)[0]
            if bad.size:
                raise DegenerateElementError(
                    f"{bad.size} tetrahedra with non-positive volume "
                    f"(first: element {int(bad[0])})",
                    elements=bad.tolist(),
                )
        if self.dirichlet.size:
            if self.dirichlet.min() < 0 or self.dirichlet.max() >= 3 * self.n_vertices:
                raise ValueError("dirichlet DOF id out of range")

    def copy(self):
        return Mesh(self.coords.copy(), self.tets.copy(), self.dirichlet.copy())


class DofMap:
    """Maps (vertex, axis) to free DOF ids and back."""

    def __init__(self, n_vertices, dirichlet):
        free = np.ones(3 * n_vertices, dtype=bool)
        free[dirichlet] = False
        self.dof_of_raw = np.where(free, np.cumsum(free) - 1, -1).astype(np.int32)
        self.n = int(free.sum())
        free_raw = np.nonzero(free)[0]
        self.vertex_of_dof = (free_raw // 3).astype(np.int32)
        self.axis_of_dof = (free_raw % 3).astype(np.int32)

    def dof(self, vertex, axis):
        """Free DOF id of (vertex, axis), or -1 if constrained."""
        return int(self.dof_of_raw[3 * int(vertex) + int(axis)])

    def dofs_of_vertex(self, vertex):
        """Free DOF ids of a vertex, constrained axes omitted."""
        d = self.dof_of_raw[3 * int(vertex): 3 * int(vertex) + 3]
        return d[d >= 0].copy()


def build_dofmap(mesh):
    return DofMap(mesh.n_vertices, mesh.dirichlet)


def elastic_moduli(material):
    """6x6 constitutive matrix, Voigt order (xx, yy, zz, xy, yz, zx),
    engineering shear strains."""
    e, nu = material.young, material.poisson
    lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = e / (2.0 * (1.0 + nu))
    c = np.zeros((6, 6))
    c[:3, :3] = lam
    c[np.arange(3), np.arange(3)] += 2.0 * mu
    c[np.arange(3, 6), np.arange(3, 6)] = mu
    return c


def _volumes(coords, tets):
    x = coords[tets]
    j = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
    return np.linalg.det(j) / 6.0


def _batch_b_vol(coords, tets):
    """Strain-displacement matrices (T, 6, 12) and volumes (T,)."""
    x = coords[tets]
    j = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
    det = np.linalg.det(j)
    bad = np.nonzero(det <= 0.0)[0]
    if bad.size:
        raise DegenerateElementError(
            f"{bad.size} tetrahedra with non-positive volume "
            f"(first: element {int(bad[0])})",
            elements=bad.tolist(),
        )
    jinv = np.linalg.inv(j)
    t = tets.shape[0]
    g = np.empty((t, 4, 3))
    g[:, 1:, :] = jinv
    g[:, 0, :] = -jinv.sum(axis=1)
    b = np.zeros((t, 6, 12))
    for a in range(4):
        gx, gy, gz = g[:, a, 0], g[:, a, 1], g[:, a, 2]
        c = 3 * a
        b[:, 0, c] = gx
        b[:, 1, c + 1] = gy
        b[:, 2, c + 2] = gz
        b[:, 3, c] = gy
        b[:, 3, c + 1] = gx
        b[:, 4, c + 1] = gz
        b[:, 4, c + 2] = gy
        b[:, 5, c] = gz
        b[:, 5, c + 2] = gx
    return b, det / 6.0


def _batch_element_stiffness(coords, tets, material):
    b, vol = _batch_b_vol(coords, tets)
    c = elastic_moduli(material)
    ke = np.einsum("tji,jk,tkl->til", b, c, b, optimize=True)
    ke *= vol[:, None, None]
    return ke


def element_stiffness(coords, material=Material()):
    """12x12 stiffness of one tetrahedron.

    ``coords`` is (4, 3); vertex order must give positive volume. DOFs are
    (v0x, v0y, v0z, v1x, ...).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (4, 3):
        raise ValueError("coords must be (4, 3)")
    return _batch_element_stiffness(coords, np.arange(4, dtype=np.int32)[None, :], material)[0]


def assemble_stiffness(mesh, material=Material()):
    """Assemble the reduced stiffness matrix.

    Constrained DOFs are eliminated by dropping their rows and columns.
    Returns ``(K, dofmap)`` with K symmetric positive definite of order
    ``mesh.n_free`` for a properly anchored mesh.
    """
    dofmap = build_dofmap(mesh)
    n = dofmap.n
    if mesh.n_tets == 0:
        return SparseMatrix.from_coo(n, n, [], [], []), dofmap
    ke = _batch_element_stiffness(mesh.coords, mesh.tets, material)
    t = mesh.n_tets
    raw = (3 * mesh.tets[:, :, None] + np.arange(3)[None, None, :]).reshape(t, 12)
    dofs = dofmap.dof_of_raw[raw]
    rows = np.repeat(dofs, 12, axis=1).reshape(t, 12, 12)
    cols = np.tile(dofs, (1, 12)).reshape(t, 12, 12)
    mask = (rows >= 0) & (cols >= 0)
    k = SparseMatrix.from_coo(n, n, rows[mask], cols[mask], ke[mask])
    return k, dofmap


def local_stiffness_diff(mesh_before, mesh_after, affected_before,
                         affected_after=None, h_prior=(), material=Material()):
    """Update decomposition between two meshes differing in the given
    elements.

    Computes the index set and dense update E such that, with
    K = assemble(mesh_before), K_hat = assemble(mesh_after), Kbar the
    identity-padded K and Hbar the selector of the update DOFs,
    K_hat = Kbar - Hbar (E + diag(0_m, I_k)) Hbar^T exactly.

    Parameters
    ----------
    affected_before, affected_after : element id sequences
        Elements whose contribution differs, in each mesh's numbering.
        ``affected_after`` defaults to ``affected_before`` (connectivity
        edits in place).
    h_prior : sequence of free DOF ids
        Already-tracked update DOFs; E rows/cols are laid out as
        ``list(h_prior) + h_delta`` followed by the new DOFs in id order.

    Returns
    -------
    (h_delta, k_delta, e) : changed existing free DOFs not in ``h_prior``
        (ascending), count of new DOFs, and the dense update of order
        ``len(h_prior) + len(h_delta) + k_delta``.
    """
    if affected_after is None:
        affected_after = affected_before
    affected_before = np.asarray(affected_before, dtype=np.int64)
    affected_after = np.asarray(affected_after, dtype=np.int64)
    dm_before = build_dofmap(mesh_before)
    dm_after = build_dofmap(mesh_after)
    n = dm_before.n
    k_delta = dm_after.n - n
    if k_delta < 0:
        raise ValueError("mesh_after has fewer DOFs than mesh_before")
    if not np.array_equal(mesh_before.dirichlet, mesh_after.dirichlet):
        raise ValueError("constraint sets must match")

    def _scatter_list(mesh, dm, affected):
        if affected.size == 0:
            return (np.empty(0, dtype=np.int32), np.empty((0, 12, 12)))
        tets = mesh.tets[affected]
        ke = _batch_element_stiffness(mesh.coords, tets, material)
        raw = (3 * tets[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 12)
        dofs = dm.dof_of_raw[raw]
        return dofs, ke

    dofs_b, ke_b = _scatter_list(mesh_before, dm_before, affected_before)
    dofs_a, ke_a = _scatter_list(mesh_after, dm_after, affected_after)

    touched = np.unique(np.concatenate([dofs_b.ravel(), dofs_a.ravel()]))
    touched = touched[(touched >= 0) & (touched < n)]
    h_prior = np.asarray(list(h_prior), dtype=np.int64)
    h_delta = np.setdiff1d(touched, h_prior).astype(np.int32)
    h_all = np.concatenate([h_prior, h_delta]).astype(np.int64)
    m = h_all.shape[0]

    pos = np.full(dm_after.n, -1, dtype=np.int64)
    pos[h_all] = np.arange(m)
    if k_delta:
        pos[n:] = m + np.arange(k_delta)

    e = np.zeros((m + k_delta, m + k_delta))

    def _accumulate(dofs, ke, sign):
        for t in range(dofs.shape[0]):
            # constrained DOFs map to -1 and are dropped; every free DOF of
            # an affected element is in pos by construction of touched
            ok = dofs[t] >= 0
            idx = pos[dofs[t][ok]]
            sub = sign * ke[t][np.ix_(ok, ok)]
            e[np.ix_(idx, idx)] += sub

    _accumulate(dofs_b, ke_b, +1)
    _accumulate(dofs_a, ke_a, -1)
    return h_delta, int(k_delta), e


def save_mesh(mesh, path):
    """Write the mesh text format:

    header ``vertices N tets M dirichlet D``, then N coordinate lines,
    M tet lines (vertex ids), D constrained DOF ids, all 0-based.
    """
    buf = io.StringIO()
    buf.write(f"vertices {mesh.n_vertices} tets {mesh.n_tets} dirichlet {mesh.dirichlet.shape[0]}\n")
    for p in mesh.coords:
        buf.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    for t in mesh.tets:
        buf.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
    for d in mesh.dirichlet:
        buf.write(f"{d}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_mesh(path):
    """Read the mesh text format written by :func:`save_mesh`."""
    with open(path) as fh:
        tokens = fh.readline().split()
        if len(tokens) != 6 or tokens[0] != "vertices" or tokens[2] != "tets" or tokens[4] != "dirichlet":
            raise ValueError("bad mesh header")
        nv, nt, nd = int(tokens[1]), int(tokens[3]), int(tokens[5])
        coords = np.loadtxt(fh, max_rows=nv, ndmin=2) if nv else np.empty((0, 3))
        tets = (
            np.loadtxt(fh, dtype=np.int64, max_rows=nt, ndmin=2)
            if nt
            else np.empty((0, 4), dtype=np.int64)
        )
        dirichlet = np.loadtxt(fh, dtype=np.int64, max_rows=nd, ndmin=1) if nd else []
    mesh = Mesh(coords, tets, dirichlet)
    mesh.validate()
    return mesh
