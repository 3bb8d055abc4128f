"""Multiscale space construction and coarse-grid matrices.

For every coarse vertex ``i`` the neighborhood ``omega_i`` is the union of
coarse triangles touching it.  The first basis function is the multiscale
hat ``chi_i`` (discrete harmonic extension, element by element, of the
linear hat trace), so the first bases form a partition of unity.  Further
bases are ``chi_i * psi_j`` where ``psi_j`` are the low modes of the local
spectral problem ``a_omega(psi, v) = lambda s_omega(psi, v)`` posed on the
space of discrete harmonic snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import AssemblyParams, assemble_mass, assemble_stiffness, element_data, local_matrices
from .exceptions import AssemblyError, DegenerateNeighborhoodError, InvalidArgumentError, SpectralError
from .geometry import CoarseMesh, FineMesh, neighborhood_elements, region_boundary_nodes

# --------------------------------------------------------------------------
# dense symmetric eigensolvers


def _round_robin(n):
    """Pairings of a round-robin tournament: n-1 rounds (n even) of disjoint pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[k], players[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        rounds.append((np.array([p for p, _ in pairs], dtype=np.int64), np.array([q for _, q in pairs], dtype=np.int64)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(C, tol=1e-15, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all index pairs in a fixed round-robin order; the
    disjoint rotations of one round are applied together.  A pair is left
    alone once ``|c_pq| <= tol * sqrt(|c_pp c_qq|)`` or it is below
    ``tol * ||C||`` in absolute terms; iteration stops after a sweep with no
    rotation.  Returns ascending eigenvalues and orthonormal eigenvectors.
    """
    C = np.array(C, dtype=float, copy=True)
    n = C.shape[0]
    if C.shape != (n, n):
        raise InvalidArgumentError("matrix must be square")
    V = np.eye(n)
    if n == 1:
        return C.diagonal().copy(), V
    C = 0.5 * (C + C.T)
    rounds = _round_robin(n)
    floor = tol * np.linalg.norm(C)
    for _ in range(max_sweeps):
        rotated = False
        for P, Q in rounds:
            app, aqq, apq = C[P, P], C[Q, Q], C[P, Q]
            active = (np.abs(apq) > tol * np.sqrt(np.abs(app * aqq))) & (np.abs(apq) > floor)
            if not active.any():
                continue
            rotated = True
            P, Q = P[active], Q[active]
            app, aqq, apq = app[active], aqq[active], apq[active]
            theta = (aqq - app) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 1.0, theta)
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.where(safe >= 0.0, 1.0, -1.0) / (np.abs(safe) + np.sqrt(1.0 + safe * safe)),
            )
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # C <- J^T C J, J rotating columns (P, Q)
            rp, rq = C[P, :].copy(), C[Q, :].copy()
            C[P, :] = c[:, None] * rp - s[:, None] * rq
            C[Q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = C[:, P].copy(), C[:, Q].copy()
            C[:, P] = cp * c - cq * s
            C[:, Q] = cp * s + cq * c
            C[P, Q] = 0.0
            C[Q, P] = 0.0
            vp, vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = vp * c - vq * s
            V[:, Q] = vp * s + vq * c
        if not rotated:
            break
    else:
        raise SpectralError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(C).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def generalized_eigh(A, S, tol=1e-15):
    """Solve ``A v = lambda S v`` for symmetric A and SPD S.

    S is whitened by its Cholesky factor and the resulting standard problem
    is handed to :func:`jacobi_eigh`.  Eigenvectors are S-orthonormal.
    """
    A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        shift = 1e-12 * np.trace(S) / len(S)
        try:
            L = np.linalg.cholesky(S + shift * np.eye(len(S)))
        except np.linalg.LinAlgError:
            raise SpectralError("snapshot weight matrix is not positive definite") from None
    Linv_A = sla.solve_triangular(L, A, lower=True)
    C = sla.solve_triangular(L, Linv_A.T, lower=True)
    w, Y = jacobi_eigh(C, tol=tol)
    V = sla.solve_triangular(L.T, Y, lower=False)
    return w, V


def _fix_sign(vectors):
    """Make the largest-magnitude entry of each column positive (ties: lowest index)."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


# --------------------------------------------------------------------------
# local problems


@dataclass(frozen=True)
class Snapshots:
    """Discrete harmonic snapshots on one neighborhood.

    ``values[:, l]`` lives on the fine vertices ``nodes`` and equals the
    Kronecker delta of ``boundary[l]`` on the neighborhood boundary.
    """

    vertex: int
    nodes: np.ndarray
    boundary: np.ndarray
    values: np.ndarray
    elements: np.ndarray

    def as_fine_vectors(self, n_fine):
        out = np.zeros((n_fine, self.values.shape[1]))
        out[self.nodes] = self.values
        return out


def harmonic_extension(A_local, boundary_mask, boundary_values):
    """Values of the discrete harmonic function with the given boundary data.

    ``A_local`` is the stiffness on a region, ``boundary_mask`` flags its
    boundary nodes, ``boundary_values`` has one column per data set.
    """
    interior = ~boundary_mask
    boundary_values = np.asarray(boundary_values, dtype=float)
    squeeze = boundary_values.ndim == 1
    if squeeze:
        boundary_values = boundary_values[:, None]
    out = np.zeros((len(boundary_mask), boundary_values.shape[1]))
    out[boundary_mask] = boundary_values
    if interior.any():
        A_ii = A_local[np.ix_(interior, interior)]
        rhs = -A_local[np.ix_(interior, boundary_mask)] @ boundary_values
        try:
            out[interior] = sla.cho_solve(sla.cho_factor(A_ii, lower=True), rhs)
        except np.linalg.LinAlgError:
            raise DegenerateNeighborhoodError("local Dirichlet problem is singular") from None
    return out[:, 0] if squeeze else out


def compute_snapshots(mesh: FineMesh, coarse: CoarseMesh, i: int, params: AssemblyParams) -> Snapshots:
    """One harmonic snapshot per fine boundary node of omega_i."""
    elems = neighborhood_elements(mesh, coarse, i)
    boundary = region_boundary_nodes(mesh, elems)
    nodes, A, _ = local_matrices(mesh, params, elems)
    bmask = np.isin(nodes, boundary)
    if bmask.all():
        raise DegenerateNeighborhoodError(f"neighborhood of coarse vertex {i} has no interior fine nodes")
    # boundary nodes in increasing index order match np.isin ordering within nodes
    bnodes = nodes[bmask]
    values = harmonic_extension(A, bmask, np.eye(len(bnodes)))
    return Snapshots(int(i), nodes, bnodes, values, elems)


def _weight_per_triangle(mesh: FineMesh, coarse: CoarseMesh):
    # sum of squared linear-hat gradients of the parent coarse element
    g = coarse.hat_gradients()
    w_coarse = np.sum(g * g, axis=(1, 2))
    return w_coarse[mesh.parent]


def spectral_weight_matrix(mesh: FineMesh, coarse: CoarseMesh, params: AssemblyParams, elems, nodes):
    """Dense ``s_omega`` on ``nodes``: integral of kappa * sum |grad chi_j|^2 * u * v.

    Triangles carry k_m, fracture edges carry k_f times a 1D consistent mass.
    """
    data = element_data(mesh)
    weight = _weight_per_triangle(mesh, coarse)
    n_fine = mesh.n_vertices
    conn = mesh.elements[elems]
    vals = (params.k_m * weight[elems])[:, None, None] * data.mass[elems]
    rows = [np.repeat(conn, 3, axis=1).ravel()]
    cols = [np.tile(conn, (1, 3)).ravel()]
    vv = [vals.ravel()]
    mask = np.zeros(mesh.n_elements, dtype=bool)
    mask[elems] = True
    sel = mask[data.frac_tri]
    if sel.any():
        t = data.frac_tri[sel]
        loc = data.frac_local[sel]
        a = mesh.elements[t, loc[:, 0]]
        b = mesh.elements[t, loc[:, 1]]
        m = params.k_f * weight[t] * data.frac_len[sel] / 6.0
        rows.append(np.concatenate([a, b, a, b]))
        cols.append(np.concatenate([a, b, b, a]))
        vv.append(np.concatenate([2 * m, 2 * m, m, m]))
    S = sp.coo_matrix((np.concatenate(vv), (np.concatenate(rows), np.concatenate(cols))), shape=(n_fine, n_fine))
    S = S.tocsr()[nodes][:, nodes].toarray()
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class LocalSpectrum:
    vertex: int
    nodes: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray  # (len(nodes), n_modes), s_omega-orthonormal, sign-fixed


def local_spectral_basis(snapshots: Snapshots, mesh, coarse, i, params, N_b):
    """Low modes of the snapshot-space spectral problem on omega_i.

    Returns ``(eigenvalues, modes)``: all eigenvalues in ascending order and
    the ``N_b`` lowest eigenfunctions on ``snapshots.nodes``.
    """
    n_snap = snapshots.values.shape[1]
    if not 1 <= N_b <= n_snap:
        raise InvalidArgumentError(f"N_b={N_b} must lie in [1, {n_snap}]")
    spectrum = _spectrum(snapshots, mesh, coarse, params)
    return spectrum.eigenvalues, spectrum.modes[:, :N_b]


def _spectrum(snapshots, mesh, coarse, params):
    _, A, _ = local_matrices(mesh, params, snapshots.elements, snapshots.nodes)
    S = spectral_weight_matrix(mesh, coarse, params, snapshots.elements, snapshots.nodes)
    E = snapshots.values
    A_snap = E.T @ A @ E
    S_snap = E.T @ S @ E
    w, V = generalized_eigh(A_snap, S_snap)
    modes = _fix_sign(E @ V)
    return LocalSpectrum(snapshots.vertex, snapshots.nodes, w, modes)


def local_spectra(mesh: FineMesh, coarse: CoarseMesh, params: AssemblyParams):
    """Spectral decomposition for every coarse vertex (independent of N_b)."""
    return tuple(_spectrum(compute_snapshots(mesh, coarse, i, params), mesh, coarse, params) for i in range(coarse.n_vertices))


def multiscale_hats(mesh: FineMesh, coarse: CoarseMesh, params: AssemblyParams) -> np.ndarray:
    """Partition of unity ``chi`` of shape (n_fine, n_coarse_vertices).

    Inside each coarse triangle the three linear hats' boundary traces are
    extended discretely harmonically; the third is taken as one minus the
    other two, so the columns sum to one to rounding.
    """
    chi = np.zeros((mesh.n_vertices, coarse.n_vertices))
    grads = coarse.hat_gradients()
    for K, tri in enumerate(coarse.elements):
        elems = mesh.element_to_fine[K]
        nodes, A, _ = local_matrices(mesh, params, elems)
        bnodes = region_boundary_nodes(mesh, elems)
        bmask = np.isin(nodes, bnodes)
        xy = mesh.vertices[nodes[bmask]]
        # linear hats of the first two element vertices on the boundary
        vals = np.empty((bmask.sum(), 2))
        for a in range(2):
            vals[:, a] = 1.0 + (xy - coarse.vertices[tri[a]]) @ grads[K, a]
        ext = harmonic_extension(A, bmask, vals)
        ext[bmask] = vals
        chi[nodes, tri[0]] = ext[:, 0]
        chi[nodes, tri[1]] = ext[:, 1]
        chi[nodes, tri[2]] = 1.0 - ext[:, 0] - ext[:, 1]
    # linear hats vanish to rounding at far vertices; clean exact zeros there
    chi[np.abs(chi) < 1e-15] = 0.0
    return chi


# --------------------------------------------------------------------------
# multiscale space


@dataclass(frozen=True, eq=False)
class MultiscaleSpace:
    """Coarse basis on the fine grid.

    Global coarse DOF of (vertex i, basis j) is ``i * N_b + j``; basis
    ``j = 0`` is the partition-of-unity function.  DOFs of vertices on the
    Dirichlet (left) boundary are kept in the numbering but flagged as not
    free.
    """

    N_b: int
    basis: sp.csc_matrix  # (n_fine, n_dof)
    chi: np.ndarray
    spectra: tuple
    free: np.ndarray  # (n_dof,) bool
    dirichlet_vertices: np.ndarray

    @property
    def n_dof(self):
        return self.basis.shape[1]

    @property
    def n_free(self):
        return int(self.free.sum())

    @property
    def dimension(self):
        """Number of free coarse DOFs (vertices off the Dirichlet boundary)."""
        return self.n_free

    def global_index(self, i, j):
        if not 0 <= j < self.N_b:
            raise InvalidArgumentError(f"basis index {j} out of range")
        return int(i) * self.N_b + int(j)

    def eigenvalues(self, i):
        return self.spectra[i].eigenvalues

    def prolong(self, c):
        """Fine-grid values of the coarse function with full coefficient vector ``c``."""
        return self.basis @ np.asarray(c)


NORMALIZATIONS = ("energy", "mass")


def build_space(
    mesh: FineMesh, coarse: CoarseMesh, params: AssemblyParams, N_b: int, spectra=None, normalization="energy", basis_scale=1.0
) -> MultiscaleSpace:
    """Assemble the multiscale basis with ``N_b`` functions per coarse vertex.

    Higher basis functions ``chi_i * psi_j`` are scaled to unit fine energy
    (``normalization="energy"``), or made L2-orthogonal to the earlier
    functions of the same vertex and scaled to ``basis_scale`` times the L2
    norm of ``chi_i`` (``"mass"``).  Both leave the span, and so every Galerkin solution,
    unchanged; they only change the coordinates of the coarse matrices.
    """
    if N_b < 1:
        raise InvalidArgumentError("N_b must be at least 1")
    if normalization not in NORMALIZATIONS:
        raise InvalidArgumentError(f"unknown normalization {normalization!r}")
    if basis_scale <= 0:
        raise InvalidArgumentError("basis_scale must be positive")
    if spectra is None and N_b > 1:
        spectra = local_spectra(mesh, coarse, params)
    chi = multiscale_hats(mesh, coarse, params)
    A_fine = assemble_stiffness(mesh, params)
    M_fine = assemble_mass(mesh, params) if normalization == "mass" else None
    rows, cols, vals = [], [], []
    for i in range(coarse.n_vertices):
        support = np.flatnonzero(chi[:, i])
        rows.append(support)
        cols.append(np.full(len(support), i * N_b))
        vals.append(chi[support, i])
        if N_b == 1:
            continue
        spec = spectra[i]
        if spec.modes.shape[1] < N_b:
            raise InvalidArgumentError(f"vertex {i} has only {spec.modes.shape[1]} snapshot modes")
        previous = [chi[:, i]]
        for j in range(1, N_b):
            phi = np.zeros(mesh.n_vertices)
            phi[spec.nodes] = chi[spec.nodes, i] * spec.modes[:, j]
            energy = phi @ (A_fine @ phi)
            if energy <= 0:
                raise SpectralError(f"basis ({i}, {j}) has no energy")
            if normalization == "energy":
                phi /= np.sqrt(energy)
            else:
                # Gram-Schmidt (twice) against this vertex's earlier functions
                for _ in range(2):
                    for q in previous:
                        phi -= (q @ (M_fine @ phi)) / (q @ (M_fine @ q)) * q
                scale = chi[:, i] @ (M_fine @ chi[:, i])
                norm2 = phi @ (M_fine @ phi)
                if norm2 <= 1e-24 * scale:
                    raise SpectralError(f"basis ({i}, {j}) is dependent on earlier functions")
                phi *= np.sqrt(scale / norm2) * basis_scale
                previous.append(phi)
            nz = np.flatnonzero(phi)
            rows.append(nz)
            cols.append(np.full(len(nz), i * N_b + j))
            vals.append(phi[nz])
    n_dof = coarse.n_vertices * N_b
    basis = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_vertices, n_dof),
    )
    dv = coarse.dirichlet_vertices()
    free = np.ones(n_dof, dtype=bool)
    for i in dv:
        free[i * N_b : (i + 1) * N_b] = False
    return MultiscaleSpace(N_b, basis, chi, tuple(spectra) if spectra is not None else (), free, dv)


def write_eigenvalues_csv(path, space: MultiscaleSpace):
    """``vertex,rank,eigenvalue`` for every local spectrum."""
    with open(path, "w") as fh:
        fh.write("vertex,rank,eigenvalue\n")
        for spec in space.spectra:
            for rank, lam in enumerate(spec.eigenvalues):
                fh.write(f"{spec.vertex},{rank},{lam:.17g}\n")


# --------------------------------------------------------------------------
# coarse system


@dataclass(frozen=True, eq=False)
class CoarseSystem:
    """Element-wise coarse matrices.

    ``M_blocks[K]`` / ``A_blocks[K]`` are (3 N_b, 3 N_b) with local DOF
    ``v * N_b + j`` for element vertex slot ``v`` and basis ``j``;
    ``dof_map[K]`` gives the matching global DOFs.
    """

    M_blocks: np.ndarray
    A_blocks: np.ndarray
    dof_map: np.ndarray
    free: np.ndarray
    volumes: np.ndarray
    hat_gradients: np.ndarray
    N_b: int
    mass_coefficient: float = 1.0
    source: float = 0.0
    first_local: np.ndarray = field(init=False)

    def __post_init__(self):
        first = np.zeros(3 * self.N_b, dtype=bool)
        first[:: self.N_b] = True
        object.__setattr__(self, "first_local", first)

    @property
    def n_dof(self):
        return len(self.free)

    @property
    def n_elements(self):
        return len(self.M_blocks)

    def with_blocks(self, M_blocks, A_blocks):
        return replace(self, M_blocks=M_blocks, A_blocks=A_blocks)

    def _global(self, blocks):
        d = blocks.shape[1]
        rows = np.repeat(self.dof_map, d, axis=1).ravel()
        cols = np.tile(self.dof_map, (1, d)).ravel()
        mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(self.n_dof, self.n_dof)).tocsr()
        mat.eliminate_zeros()
        mat.sort_indices()
        return mat

    def global_M(self):
        return self._global(self.M_blocks)

    def global_A(self):
        return self._global(self.A_blocks)

    def basis_integrals(self):
        """``(1, phi_m)`` for every DOF, from the partition-of-unity columns of M."""
        out = np.zeros(self.n_dof)
        contrib = self.M_blocks[:, :, self.first_local].sum(axis=2) / self.mass_coefficient
        np.add.at(out, self.dof_map.ravel(), contrib.ravel())
        return out

    def load(self, t=0.0):
        """Load vector ``b(t) = (f, phi_m)`` for the constant source ``f``."""
        return self.source * self.basis_integrals()

    def cell_integrals(self, c):
        """Integral of the coarse function over each cell; ``c`` may be (..., n_dof)."""
        c = np.asarray(c, dtype=float)
        local = c[..., self.dof_map]  # (..., N_K, d)
        pou = self.M_blocks[:, :, self.first_local].sum(axis=2)  # (N_K, d)
        return np.einsum("...kd,kd->...k", local, pou) / self.mass_coefficient

    def cell_averages(self, c):
        return self.cell_integrals(c) / self.volumes


def fine_cell_averages(mesh: FineMesh, coarse: CoarseMesh, u):
    """Exact cell averages of P1 fine functions; ``u`` may be (..., n_fine)."""
    u = np.asarray(u, dtype=float)
    areas = mesh.areas()
    tri_mean = u[..., mesh.elements].mean(axis=-1) * areas
    out = np.zeros(u.shape[:-1] + (coarse.n_elements,))
    for K in range(coarse.n_elements):
        out[..., K] = tri_mean[..., mesh.element_to_fine[K]].sum(axis=-1)
    return out / coarse.areas()


def assemble_coarse(space: MultiscaleSpace, mesh: FineMesh, coarse: CoarseMesh, params: AssemblyParams) -> CoarseSystem:
    """Element-wise Galerkin matrices ``Phi_K^T A_K Phi_K`` and ``Phi_K^T M_K Phi_K``."""
    N_b = space.N_b
    d = 3 * N_b
    dof_map = (coarse.elements[:, :, None] * N_b + np.arange(N_b)).reshape(-1, d)
    if dof_map.max() >= space.n_dof:
        raise AssemblyError("coarse DOF map exceeds the space dimension")
    M_blocks = np.empty((coarse.n_elements, d, d))
    A_blocks = np.empty((coarse.n_elements, d, d))
    basis = space.basis.tocsr()
    for K in range(coarse.n_elements):
        nodes, A_K, M_K = local_matrices(mesh, params, mesh.element_to_fine[K])
        Phi = basis[nodes][:, dof_map[K]].toarray()
        MK = Phi.T @ M_K @ Phi
        AK = Phi.T @ A_K @ Phi
        M_blocks[K] = 0.5 * (MK + MK.T)
        A_blocks[K] = 0.5 * (AK + AK.T)
    return CoarseSystem(
        M_blocks=M_blocks,
        A_blocks=A_blocks,
        dof_map=dof_map,
        free=space.free.copy(),
        volumes=coarse.areas(),
        hat_gradients=coarse.hat_gradients(),
        N_b=N_b,
        mass_coefficient=params.c_m,
        source=params.f,
    )


def l2_projection(space: MultiscaleSpace, csys: CoarseSystem, M_fine, u):
    """Coefficients (full length, zero on Dirichlet DOFs) of the L2 projection of ``u``."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    free = csys.free
    M = csys.global_M().toarray()[np.ix_(free, free)]
    rhs = (space.basis.T @ (M_fine @ u.T))[free]
    c = np.zeros((space.n_dof, u.shape[0]))
    c[free] = sla.cho_solve(sla.cho_factor(M, lower=True), rhs)
    return c.T


def coarse_projection_error(space, csys, mesh, coarse, params, fine_states):
    """Relative cell-average mismatch between fine states and their projections.

    ``fine_states`` is (n_times, n_fine).  Returns ``(per_step, aggregate)``
    where each step compares cell averages of ``u_h(t_n)`` and of its L2
    projection onto the multiscale space.
    """
    U = np.atleast_2d(np.asarray(fine_states, dtype=float))
    M_fine = assemble_mass(mesh, params)
    C = l2_projection(space, csys, M_fine, U)
    g_fine = fine_cell_averages(mesh, coarse, U)
    g_coarse = csys.cell_averages(C)
    num = np.linalg.norm(g_coarse - g_fine, axis=1)
    den = np.linalg.norm(g_fine, axis=1)
    per_step = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    total_den = np.sqrt(np.sum(den**2))
    agg = np.sqrt(np.sum(num**2)) / total_den if total_den > 0 else np.sqrt(np.sum(num**2))
    return per_step, float(agg)
