"""Implicit Euler time stepping, cell-average observations and synthetic data."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import AssemblyParams
from .exceptions import FluxRecoveryError, ForwardSolveError, InvalidArgumentError
from .geometry import CoarseMesh, FineMesh
from .gmsfem import CoarseSystem, fine_cell_averages


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (n_t + 1,)
    states: np.ndarray  # (n_t + 1, n)

    @property
    def n_t(self):
        return len(self.times) - 1

    @property
    def dt(self):
        return self.times[1] - self.times[0]


_BACKWARD_TOL = 64 * np.finfo(float).eps


class _Stepper:
    """Factorised ``M + dt A`` with residual-checked solves."""

    def __init__(self, M, A, dt, rtol=1e-10):
        self.rtol = rtol
        self.sparse = sp.issparse(M) or sp.issparse(A)
        if self.sparse:
            self.B = sp.csc_matrix(M + dt * A)
            if np.any(self.B.diagonal() <= 0):
                raise ForwardSolveError("M + dt*A has a non-positive diagonal; not SPD")
            try:
                self._lu = spla.splu(self.B)
            except RuntimeError as exc:
                raise ForwardSolveError(f"factorisation of M + dt*A failed: {exc}") from None
        else:
            self.B = np.asarray(M, dtype=float) + dt * np.asarray(A, dtype=float)
            try:
                self._chol = sla.cho_factor(self.B, lower=True)
            except np.linalg.LinAlgError:
                raise ForwardSolveError("M + dt*A is not positive definite (Cholesky failed)") from None

    def _raw(self, rhs):
        return self._lu.solve(rhs) if self.sparse else sla.cho_solve(self._chol, rhs)

    def solve(self, rhs, step=None):
        x = self._raw(rhs)
        norm = np.linalg.norm(rhs)
        if norm == 0:
            return x
        r = rhs - self.B @ x
        res = np.linalg.norm(r) / norm
        for _ in range(3):
            if res <= self.rtol:
                return x
            x_new = x + self._raw(r)
            r_new = rhs - self.B @ x_new
            res_new = np.linalg.norm(r_new) / norm
            if res_new >= res:
                break
            x, r, res = x_new, r_new, res_new
        if res <= self.rtol:
            return x
        # Stiff fracture rows put the normwise residual floor above rtol; accept
        # a solve that is componentwise backward stable to working precision.
        scale = abs(self.B) @ np.abs(x) + np.abs(rhs)
        omega = np.max(np.abs(r) / np.where(scale > 0, scale, 1.0))
        if omega <= _BACKWARD_TOL:
            return x
        where = "" if step is None else f" at step {step}"
        raise ForwardSolveError(f"linear solve{where} left relative residual {res:.2e} (backward error {omega:.1e})")


def integrate(M, A, b, initial, T, n_t) -> Trajectory:
    """Implicit Euler for ``M c' + A c = b``: ``(M + dt A) c_{n+1} = M c_n + dt b``.

    ``b`` is a vector (constant in time), a callable ``b(t)`` or None.
    """
    n_t = int(n_t)
    if n_t < 1 or T <= 0:
        raise InvalidArgumentError("need n_t >= 1 and T > 0")
    dt = T / n_t
    stepper = _Stepper(M, A, dt)
    times = np.linspace(0.0, T, n_t + 1)
    states = np.empty((n_t + 1, len(initial)))
    states[0] = initial
    for n in range(n_t):
        rhs = M @ states[n]
        if b is not None:
            rhs = rhs + dt * (b(times[n + 1]) if callable(b) else b)
        states[n + 1] = stepper.solve(rhs, step=n + 1)
    return Trajectory(times, states)


def fine_trajectory(mesh: FineMesh, params: AssemblyParams, A, M) -> Trajectory:
    """Fine-grid solution with p = 0 on the left boundary and p0 elsewhere at t = 0."""
    dirichlet = mesh.dirichlet_nodes()
    free = np.ones(mesh.n_vertices, dtype=bool)
    free[dirichlet] = False
    A_ff = sp.csr_matrix(A)[free][:, free]
    M_ff = sp.csr_matrix(M)[free][:, free]
    b = None
    if params.f != 0.0:
        b = (M @ np.full(mesh.n_vertices, params.f / params.c_m))[free]
    init = np.full(free.sum(), params.p0)
    traj = integrate(M_ff, A_ff, b, init, params.T, params.n_t)
    states = np.zeros((len(traj.times), mesh.n_vertices))
    states[:, free] = traj.states
    return Trajectory(traj.times, states)


def coarse_initial_state(csys: CoarseSystem, p0=1.0, M=None):
    """Full coefficient vector of the L2 projection of the constant ``p0``."""
    free = csys.free
    if M is None:
        M = csys.global_M().toarray()
    rhs = p0 * csys.basis_integrals()[free]
    try:
        c_free = sla.cho_solve(sla.cho_factor(M[np.ix_(free, free)], lower=True), rhs)
    except np.linalg.LinAlgError:
        raise ForwardSolveError("coarse mass matrix is not positive definite") from None
    c = np.zeros(csys.n_dof)
    c[free] = c_free
    return c


def coarse_trajectory(csys: CoarseSystem, params: AssemblyParams) -> Trajectory:
    """Coarse Galerkin solution from the projected initial condition."""
    free = csys.free
    M = csys.global_M().toarray()
    A = csys.global_A().toarray()
    c0 = coarse_initial_state(csys, params.p0, M)
    b = csys.load()[free] if params.f != 0.0 else None
    traj = integrate(M[np.ix_(free, free)], A[np.ix_(free, free)], b, c0[free], params.T, params.n_t)
    states = np.zeros((len(traj.times), csys.n_dof))
    states[:, free] = traj.states
    return Trajectory(traj.times, states)


def cell_average(csys: CoarseSystem, c, K) -> float:
    """Average of the coarse function over cell K, from the mass blocks alone."""
    if not 0 <= K < csys.n_elements:
        raise InvalidArgumentError(f"cell {K} out of range")
    return float(csys.cell_averages(c)[K])


@dataclass(frozen=True)
class ObservationSeries:
    cells: np.ndarray  # observed coarse elements
    times: np.ndarray
    values: np.ndarray  # (n_times, n_cells)
    noise_level: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.noise_level < 0:
            raise InvalidArgumentError("noise level must be non-negative")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("observation values must be finite")

    def to_csv(self, path):
        lines = ["cell_id,time_index,value"]
        for j, K in enumerate(self.cells):
            for n in range(len(self.times)):
                lines.append(f"{int(K)},{n},{self.values[n, j]:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, times, noise_level=0.0):
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        cells = np.unique(raw[:, 0].astype(np.int64))
        values = np.zeros((len(times), len(cells)))
        col = {K: j for j, K in enumerate(cells)}
        for K, n, v in raw:
            values[int(n), col[int(K)]] = v
        return cls(cells, np.asarray(times), values, noise_level)


def make_observations(fine: Trajectory, mesh: FineMesh, coarse: CoarseMesh, cells, delta=0.0, seed=0) -> ObservationSeries:
    """Fine-grid cell averages, optionally perturbed as ``g (1 + delta r)``.

    ``r`` is uniform on [-1, 1], one independent draw per (time, cell), from
    ``numpy.random.default_rng(seed)``.
    """
    if delta < 0:
        raise InvalidArgumentError("noise level must be non-negative")
    cells = np.asarray(cells, dtype=np.int64)
    clean = fine_cell_averages(mesh, coarse, fine.states)[:, cells]
    values = clean
    if delta > 0:
        r = np.random.default_rng(seed).uniform(-1.0, 1.0, size=clean.shape)
        values = clean * (1.0 + delta * r)
    return ObservationSeries(cells, fine.times.copy(), values, float(delta), seed)


def recover_flux_averages(csys: CoarseSystem, c, K):
    """Recover ``int_K kappa grad u_H`` from the stiffness block of cell K.

    Uses ``A^K_{a, first(l)} = (int_K kappa grad phi_a) . grad phi0_l`` for two
    vertices ``l`` and solves the 2x2 system for each local basis; exact
    for the partition-of-unity (first) basis functions.
    """
    G = csys.hat_gradients[K][:2]  # rows: grad of linear hats of vertices 0, 1
    if abs(np.linalg.det(G)) < 1e-14 * np.abs(G).max() ** 2:
        raise FluxRecoveryError(f"cell {K}: hat gradients are linearly dependent")
    first = np.flatnonzero(csys.first_local)[:2]
    rhs = csys.A_blocks[K][:, first].T  # (2, d)
    X = np.linalg.solve(G, rhs)  # column a = int_K kappa grad phi_a
    c_local = np.asarray(c, dtype=float)[csys.dof_map[K]]
    return X @ c_local
