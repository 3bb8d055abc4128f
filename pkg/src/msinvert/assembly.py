"""P1 finite element assembly on the fine mesh.

Stiffness combines the matrix permeability on triangles with a 1D two-point
term ``(k_f / l) [[1, -1], [-1, 1]]`` on every snapped fracture edge.  Each
fracture edge is shared equally between the (one or two) fine triangles
adjacent to it, so that sub-assemblies over disjoint sets of triangles add
up to the global matrix.  Sparse matrices are ``scipy.sparse.csr_matrix``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .exceptions import AssemblyError, InvalidArgumentError, SolverError
from .geometry import FineMesh, _barycentric_gradients


@dataclass(frozen=True)
class AssemblyParams:
    k_m: float = 1.0e-3
    k_f: float = 1.0e2
    c_m: float = 1.0
    c_f: float = 1.0
    f: float = 0.0
    p0: float = 1.0
    T: float = 10.0
    n_t: int = 10

    def __post_init__(self):
        if self.k_m <= 0 or self.k_f <= 0:
            raise InvalidArgumentError("permeabilities must be positive")
        if self.c_m <= 0:
            raise InvalidArgumentError("c_m must be positive")
        if self.T <= 0 or int(self.n_t) < 1:
            raise InvalidArgumentError("need T > 0 and n_t >= 1")

    @property
    def dt(self):
        return self.T / self.n_t


def _checked_areas(p):
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if np.any(area <= 0.0):
        bad = int(np.flatnonzero(area <= 0.0)[0])
        raise AssemblyError(f"degenerate or inverted triangle {bad} (area {area[bad]:.3e})")
    return area


def p1_stiffness(p):
    """Unit-coefficient P1 stiffness for triangles ``p`` (T, 3, 2) -> (T, 3, 3)."""
    area = _checked_areas(p)
    g = _barycentric_gradients(p)
    return area[:, None, None] * np.einsum("tak,tbk->tab", g, g)


_MASS_PATTERN = (np.ones((3, 3)) + np.eye(3)) / 12.0


def p1_mass(p):
    """Unit-coefficient consistent P1 mass (T, 3, 3)."""
    return _checked_areas(p)[:, None, None] * _MASS_PATTERN


@dataclass(frozen=True)
class _ElementData:
    stiff: np.ndarray  # (T,3,3) unit-coefficient
    mass: np.ndarray  # (T,3,3) unit-coefficient
    # fracture edge shares: triangle, local vertex pair, weight = share / length
    frac_tri: np.ndarray
    frac_local: np.ndarray
    frac_weight: np.ndarray
    frac_len: np.ndarray


def _edge_triangles(mesh: FineMesh):
    tris = mesh.elements
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    local = np.concatenate(
        [np.tile([0, 1], (len(tris), 1)), np.tile([1, 2], (len(tris), 1)), np.tile([2, 0], (len(tris), 1))]
    )
    owner = np.tile(np.arange(len(tris)), 3)
    key = np.minimum(e[:, 0], e[:, 1]) * mesh.n_vertices + np.maximum(e[:, 0], e[:, 1])
    return key, owner, local


@lru_cache(maxsize=16)
def element_data(mesh: FineMesh) -> _ElementData:
    """Per-triangle unit matrices and fracture-edge shares (cached per mesh)."""
    p = mesh.vertices[mesh.elements]
    stiff = p1_stiffness(p)
    mass = p1_mass(p)
    if len(mesh.fracture_edges) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return _ElementData(stiff, mass, empty, np.zeros((0, 2), dtype=np.int64), np.zeros(0), np.zeros(0))
    key, owner, local = _edge_triangles(mesh)
    fe = mesh.fracture_edges
    fkey = fe[:, 0] * mesh.n_vertices + fe[:, 1]
    order = np.argsort(key, kind="stable")
    skey = key[order]
    lo = np.searchsorted(skey, fkey, side="left")
    hi = np.searchsorted(skey, fkey, side="right")
    lengths = np.linalg.norm(mesh.vertices[fe[:, 1]] - mesh.vertices[fe[:, 0]], axis=1)
    f_tri, f_loc, f_w, f_len = [], [], [], []
    for e, (a, b) in enumerate(zip(lo, hi)):
        if b == a:
            raise AssemblyError(f"fracture edge {tuple(fe[e])} is not a mesh edge")
        share = 1.0 / (b - a)
        for pos in order[a:b]:
            f_tri.append(owner[pos])
            f_loc.append(local[pos])
            f_w.append(share / lengths[e])
            f_len.append(share * lengths[e])
    return _ElementData(
        stiff,
        mass,
        np.array(f_tri, dtype=np.int64),
        np.array(f_loc, dtype=np.int64),
        np.array(f_w),
        np.array(f_len),
    )


def _select(data, fine_elements):
    if fine_elements is None:
        return np.arange(len(data.stiff)), np.ones(len(data.frac_tri), dtype=bool)
    fine_elements = np.asarray(fine_elements)
    mask = np.zeros(len(data.stiff), dtype=bool)
    mask[fine_elements] = True
    return fine_elements, mask[data.frac_tri]


def _coo(mesh, blocks, tris, extra=None):
    conn = mesh.elements[tris]
    rows = np.repeat(conn, 3, axis=1).ravel()
    cols = np.tile(conn, (1, 3)).ravel()
    vals = blocks.ravel()
    if extra is not None:
        er, ec, ev = extra
        rows = np.concatenate([rows, er])
        cols = np.concatenate([cols, ec])
        vals = np.concatenate([vals, ev])
    return rows, cols, vals


def _mirror(mat):
    # keep the upper triangle and reflect it, so symmetry is exact
    upper = sp.triu(mat, format="csr")
    full = (upper + sp.triu(upper, k=1, format="csr").T).tocsr()
    full.eliminate_zeros()
    full.sort_indices()
    return full


def _zero_row_sums(mat):
    # diagonal = -(sum of off-diagonals), so constants stay in the kernel
    # to rounding even next to stiff fracture edges
    n = mat.shape[0]
    rows = np.repeat(np.arange(n), np.diff(mat.indptr))
    off = rows != mat.indices
    sums = np.bincount(rows[off], weights=mat.data[off], minlength=n)
    mat.data[~off] = -sums[rows[~off]]
    return mat


def assemble_stiffness(mesh: FineMesh, params: AssemblyParams, fine_elements=None) -> sp.csr_matrix:
    """Global (or sub-region) stiffness without boundary conditions."""
    data = element_data(mesh)
    tris, fsel = _select(data, fine_elements)
    blocks = params.k_m * data.stiff[tris]
    extra = None
    if fsel.any():
        t = data.frac_tri[fsel]
        loc = data.frac_local[fsel]
        w = params.k_f * data.frac_weight[fsel]
        a = mesh.elements[t, loc[:, 0]]
        b = mesh.elements[t, loc[:, 1]]
        extra = (
            np.concatenate([a, b, a, b]),
            np.concatenate([a, b, b, a]),
            np.concatenate([w, w, -w, -w]),
        )
    rows, cols, vals = _coo(mesh, blocks, tris, extra)
    n = mesh.n_vertices
    return _zero_row_sums(_mirror(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()))


def assemble_mass(mesh: FineMesh, params: AssemblyParams, fine_elements=None) -> sp.csr_matrix:
    """Consistent P1 mass weighted by c_m.

    Fractures have zero width, so ``c_f`` multiplies a zero-measure term and
    adds nothing.
    """
    data = element_data(mesh)
    tris, _ = _select(data, fine_elements)
    rows, cols, vals = _coo(mesh, params.c_m * data.mass[tris], tris)
    n = mesh.n_vertices
    return _mirror(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr())


def local_matrices(mesh: FineMesh, params: AssemblyParams, fine_elements, nodes=None):
    """Dense stiffness/mass restricted to a set of fine triangles.

    Returns ``(nodes, A, M)`` where ``nodes`` are the fine vertices touched,
    in increasing order unless given explicitly.
    """
    fine_elements = np.asarray(fine_elements)
    if nodes is None:
        nodes = np.unique(mesh.elements[fine_elements])
    A = assemble_stiffness(mesh, params, fine_elements)[nodes][:, nodes].toarray()
    M = assemble_mass(mesh, params, fine_elements)[nodes][:, nodes].toarray()
    return nodes, A, M


def apply_dirichlet(A, rhs, nodes, values=0.0):
    """Symmetric elimination: zero rows/columns, unit diagonal, lift into rhs."""
    A = sp.csr_matrix(A, copy=True)
    rhs = np.array(rhs, dtype=float, copy=True)
    nodes = np.asarray(nodes, dtype=np.int64)
    u = np.zeros(A.shape[0])
    u[nodes] = values
    rhs -= A @ u
    keep = np.ones(A.shape[0])
    keep[nodes] = 0.0
    D = sp.diags(keep)
    A = (D @ A @ D).tocsr()
    A = A + sp.diags(1.0 - keep)
    A.eliminate_zeros()
    rhs[nodes] = u[nodes]
    return A.tocsr(), rhs


def solve_spd(A, rhs, rtol=1e-10, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Raises SolverError if ``||A x - rhs|| / ||rhs|| > rtol`` after
    ``maxiter`` iterations (default ``10 n``).
    """
    A = sp.csr_matrix(A) if sp.issparse(A) else np.asarray(A, dtype=float)
    b = np.asarray(rhs, dtype=float)
    n = b.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    if maxiter is None:
        maxiter = 10 * n
    diag = A.diagonal() if sp.issparse(A) else np.diag(A).copy()
    if np.any(diag <= 0):
        raise SolverError("matrix has a non-positive diagonal entry; not SPD", None)
    inv_diag = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > rtol and it < maxiter:
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("non-positive curvature in CG; matrix not SPD", res)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        # recompute the true residual periodically to avoid drift
        if it % 50 == 0:
            r = b - A @ x
        res = np.linalg.norm(r) / bnorm
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    if res > rtol:
        raise SolverError(f"CG stopped after {it} iterations with relative residual {res:.3e}", res)
    return x
