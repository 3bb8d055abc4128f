"""Recovery of element-wise coarse matrices from cell-average pressures.

The unknowns are the local blocks ``M^K`` and ``A^K``.  The objective is

    J = |M - M0|^2 / sigma_M^2 + |A - A0|^2 / sigma_A^2
        + sum_{K observed} sum_{n=1..N} dt (g_n^K - d_n^K)^2 / sigma_F^2

with Frobenius norms over the blocks and the model data ``g`` computed by
implicit Euler on the assembled coarse system.  Gradients come from the
exact transpose of the discrete forward map (``consistent`` mode) or from
the continuous-adjoint formulas with the multiplicative block factor
(``paper`` mode).  Updates are plain gradient steps followed by block
symmetrisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .assembly import AssemblyParams
from .exceptions import ConfigError, ForwardSolveError, InvalidArgumentError, StateError, StepRejectedError
from .forward import ObservationSeries, Trajectory, _Stepper
from .gmsfem import CoarseSystem

logger = logging.getLogger(__name__)

GRADIENT_MODES = ("consistent", "paper")
STEP_POLICIES = ("fixed", "halving")


@dataclass(frozen=True)
class InversionConfig:
    sigma_M: float = 1.0
    sigma_A: float = 1.0
    sigma_F: float = 1.0e4
    epsilon: float = 1.0e-12
    n_iter: int = 100
    update_mask: np.ndarray | None = None  # coarse cells whose blocks move; None = all
    observed_cells: np.ndarray | None = None  # subset of the data cells; None = all
    gradient_mode: str = "consistent"
    step_policy: str = "fixed"
    rel_tol: float = 1.0e-10
    max_halvings: int = 40
    initial_misfit: bool = False  # also fit the data at t = 0

    def __post_init__(self):
        if min(self.sigma_M, self.sigma_A, self.sigma_F) <= 0:
            raise ConfigError("sigma_M, sigma_A and sigma_F must be positive")
        if self.epsilon <= 0:
            raise ConfigError("step length must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.step_policy not in STEP_POLICIES:
            raise ConfigError(f"unknown step policy {self.step_policy!r}")
        if self.n_iter < 0:
            raise ConfigError("n_iter must be non-negative")


@dataclass
class InversionState:
    iteration: int
    system: CoarseSystem  # current blocks
    prior: CoarseSystem  # M0, A0
    params: AssemblyParams
    data: ObservationSeries
    forward: Trajectory | None = None
    adjoint: Trajectory | None = None
    epsilon: float = 0.0
    rejected_spd: int = 0  # trial steps that broke positive definiteness
    rejected_increase: int = 0  # trial steps that raised J (halving policy)
    history: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def rejected_steps(self):
        return self.rejected_spd + self.rejected_increase

    @property
    def M_blocks(self):
        return self.system.M_blocks

    @property
    def A_blocks(self):
        return self.system.A_blocks


# --------------------------------------------------------------------------
# forward model on blocks


def _factorise(system: CoarseSystem, dt):
    free = system.free
    M = system.global_M().toarray()[np.ix_(free, free)]
    A = system.global_A().toarray()[np.ix_(free, free)]
    try:
        chol_M = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        raise ForwardSolveError("coarse mass matrix lost positive definiteness") from None
    try:
        stepper = _Stepper(M, A, dt)
    except ForwardSolveError:
        raise ForwardSolveError("M + dt*A lost positive definiteness") from None
    return M, chol_M, stepper


def forward_solve(system: CoarseSystem, params: AssemblyParams):
    """Projected initial state and implicit-Euler trajectory (full DOF vectors).

    Returns the trajectory and the factorisations reused by the adjoint.
    """
    dt = params.dt
    free = system.free
    M, chol_M, stepper = _factorise(system, dt)
    states = np.zeros((params.n_t + 1, system.n_dof))
    rhs0 = params.p0 * system.basis_integrals()[free]
    c = sla.cho_solve(chol_M, rhs0)
    states[0, free] = c
    b = system.load()[free] if system.source != 0.0 else None
    for n in range(params.n_t):
        rhs = M @ c if b is None else M @ c + dt * b
        c = stepper.solve(rhs, step=n + 1)
        states[n + 1, free] = c
    return Trajectory(np.linspace(0.0, params.T, params.n_t + 1), states), (M, chol_M, stepper)


def _observation_rows(system: CoarseSystem, cells):
    # derivative of each observed cell average w.r.t. its local coefficients
    pou = system.M_blocks[cells][:, :, system.first_local].sum(axis=2)
    return pou / (system.mass_coefficient * system.volumes[cells, None])


def _data_cells(data: ObservationSeries, config: InversionConfig):
    if config.observed_cells is None:
        return data.cells, np.arange(len(data.cells))
    wanted = np.asarray(config.observed_cells, dtype=np.int64)
    pos = {int(K): j for j, K in enumerate(data.cells)}
    missing = [int(K) for K in wanted if int(K) not in pos]
    if missing:
        raise ConfigError(f"observed cells without data: {missing[:5]}")
    return wanted, np.array([pos[int(K)] for K in wanted], dtype=np.int64)


def residuals(system: CoarseSystem, traj: Trajectory, data: ObservationSeries, config: InversionConfig):
    """Model minus data cell averages at observed cells.

    Rows are time levels ``1..N``, or ``0..N`` with ``config.initial_misfit``.
    """
    cells, cols = _data_cells(data, config)
    if data.values.shape[0] != len(traj.times):
        raise StateError("data and model time grids differ")
    first = 0 if config.initial_misfit else 1
    model = system.cell_averages(traj.states[first:])[:, cells]
    return cells, model - data.values[first:, cols]


@dataclass(frozen=True)
class AdjointTrajectory(Trajectory):
    """Adjoint levels ``w_0 .. w_N`` plus the multiplier of the initial projection."""

    initial: np.ndarray | None = None


def objective(state: InversionState, config: InversionConfig, data: ObservationSeries | None = None):
    """Return ``(J, term_M, term_A, term_F)`` for the current blocks."""
    if state.forward is None:
        raise StateError("forward trajectory missing; run the forward solve first")
    data = state.data if data is None else data
    sys_, prior = state.system, state.prior
    term_M = float(np.sum((sys_.M_blocks - prior.M_blocks) ** 2)) / config.sigma_M**2
    term_A = float(np.sum((sys_.A_blocks - prior.A_blocks) ** 2)) / config.sigma_A**2
    _, r = residuals(sys_, state.forward, data, config)
    term_F = float(state.params.dt * np.sum(r * r)) / config.sigma_F**2
    return term_M + term_A + term_F, term_M, term_A, term_F


def solve_adjoint(state: InversionState, config: InversionConfig) -> AdjointTrajectory:
    """Backward sweep of the transposed implicit-Euler map.

    ``w_N = 0`` and ``(M + dt A) w_{n-1} = M w_n + dt (2 / sigma_F^2) F^T r_n``.
    The returned trajectory holds ``w_0 .. w_N`` on the forward time grid;
    ``initial`` is the multiplier of the projection ``M c_0 = p0 (1, phi)``,
    equal to ``w_0 + M^{-1} s_0`` where ``s_0`` is the t = 0 misfit source.
    """
    if state.forward is None:
        raise StateError("forward trajectory missing")
    sys_, params = state.system, state.params
    M, chol_M, stepper = state._cache.get("factors") or forward_solve(sys_, params)[1]
    free = sys_.free
    cells, r = residuals(sys_, state.forward, state.data, config)
    shift = 0 if config.initial_misfit else 1
    rows = _observation_rows(sys_, cells)  # (n_obs, d)
    dof = sys_.dof_map[cells]
    N, dt = params.n_t, params.dt
    W = np.zeros((N + 1, sys_.n_dof))
    w = np.zeros(free.sum())
    scale = 2.0 * dt / config.sigma_F**2

    def source(n):
        src = np.zeros(sys_.n_dof)
        np.add.at(src, dof.ravel(), (scale * r[n - shift][:, None] * rows).ravel())
        return src[free]

    for n in range(N, 0, -1):
        w = stepper.solve(M @ w + source(n))
        W[n - 1, free] = w
    mu = W[0].copy()
    if config.initial_misfit:
        mu[free] += sla.cho_solve(chol_M, source(0))
    return AdjointTrajectory(state.forward.times.copy(), W, mu)


def _block_pairs(P, dof_map):
    # P[dof_map[K][a], dof_map[K][b]] for every K
    return P[dof_map[:, :, None], dof_map[:, None, :]]


def gradient(state: InversionState, config: InversionConfig):
    """Gradients of J with respect to every entry of every block.

    Blocks outside ``config.update_mask`` are returned as zero.
    """
    if state.forward is None or state.adjoint is None:
        raise StateError("forward and adjoint trajectories are required")
    sys_, prior, params = state.system, state.prior, state.params
    C, W = state.forward.states, state.adjoint.states
    dt = params.dt
    gM = 2.0 / config.sigma_M**2 * (sys_.M_blocks - prior.M_blocks)
    gA = 2.0 / config.sigma_A**2 * (sys_.A_blocks - prior.A_blocks)
    if config.gradient_mode == "consistent":
        first_global = np.zeros(sys_.n_dof)
        first_global[:: sys_.N_b] = 1.0
        # the projected c_0 enters twice and cancels: (c_0 - c_1) + (p0 e - c_0)
        PM = W[1:-1].T @ (C[1:-1] - C[2:])
        PM += np.outer(W[0], params.p0 / sys_.mass_coefficient * first_global - C[1])
        mu = getattr(state.adjoint, "initial", None)
        if mu is not None and config.initial_misfit:
            PM += np.outer(mu - W[0], params.p0 / sys_.mass_coefficient * first_global - C[0])
        PA = -dt * (W[:-1].T @ C[1:])
        gM = gM + _block_pairs(PM, sys_.dof_map)
        gA = gA + _block_pairs(PA, sys_.dof_map)
        cells, r = residuals(sys_, state.forward, state.data, config)
        first = 0 if config.initial_misfit else 1
        local_c = C[first:][:, sys_.dof_map[cells]]  # (n_levels, n_obs, d)
        v = np.einsum("nk,nkd->kd", r, local_c)
        coef = 2.0 * dt / (config.sigma_F**2 * sys_.mass_coefficient * sys_.volumes[cells])
        gM[cells] += (coef[:, None] * v)[:, :, None] * sys_.first_local[None, None, :]
    elif config.gradient_mode == "paper":
        # lambda = (sigma_F^2 / 2) w; the 2 / sigma_F^2 prefactor cancels it
        dW = W[1:] - W[:-1]
        QM = C[1:].T @ dW  # sum_n c_n[i] (w_n - w_{n-1})[j]
        QA = dt * (C[1:].T @ W[1:])
        gM = gM - sys_.M_blocks * _block_pairs(QM, sys_.dof_map)
        gA = gA - sys_.A_blocks * _block_pairs(QA, sys_.dof_map)
    else:
        raise ConfigError(f"unknown gradient mode {config.gradient_mode!r}")
    if config.update_mask is not None:
        keep = np.zeros(sys_.n_elements, dtype=bool)
        keep[np.asarray(config.update_mask, dtype=np.int64)] = True
        gM[~keep] = 0.0
        gA[~keep] = 0.0
    return gM, gA


def symmetrize(B):
    return 0.5 * (B + np.swapaxes(B, -1, -2))


def step(state: InversionState, gradients, config: InversionConfig, epsilon=None) -> CoarseSystem:
    """Blocks after one gradient step; only masked blocks change."""
    gM, gA = gradients
    eps = state.epsilon if epsilon is None else epsilon
    sys_ = state.system
    cells = np.arange(sys_.n_elements) if config.update_mask is None else np.asarray(config.update_mask, dtype=np.int64)
    M = sys_.M_blocks.copy()
    A = sys_.A_blocks.copy()
    M[cells] = symmetrize(M[cells] - eps * gM[cells])
    A[cells] = symmetrize(A[cells] - eps * gA[cells])
    return sys_.with_blocks(M, A)


def evaluate(state: InversionState, config: InversionConfig):
    """Forward solve for the current blocks and refresh the cached factors."""
    traj, factors = forward_solve(state.system, state.params)
    state.forward = traj
    state._cache["factors"] = factors
    state.adjoint = None
    return objective(state, config)


def cell_average_errors(system: CoarseSystem, traj: Trajectory, truth):
    """Root-mean-square over all cells of model minus truth cell averages, per time."""
    model = system.cell_averages(traj.states)
    return np.sqrt(np.mean((model - truth) ** 2, axis=1))


def init_state(prior: CoarseSystem, params: AssemblyParams, data: ObservationSeries, config: InversionConfig):
    state = InversionState(0, prior, prior, params, data, epsilon=config.epsilon)
    return state


def run_inversion(prior: CoarseSystem, params: AssemblyParams, data: ObservationSeries, config: InversionConfig, truth=None):
    """Gradient-descent loop starting from the prior blocks.

    ``truth`` (optional) holds fine cell averages of shape (n_t + 1, n_cells);
    when given, each history row also carries per-time RMS errors.  Returns
    ``(state, history)`` where history is a list of dicts.
    """
    state = init_state(prior, params, data, config)
    J, tM, tA, tF = evaluate(state, config)
    history = state.history

    def record(J, tM, tA, tF):
        row = {"iteration": state.iteration, "J": J, "term_M": tM, "term_A": tA, "term_F": tF, "epsilon": state.epsilon}
        if truth is not None:
            row["errors"] = cell_average_errors(state.system, state.forward, truth)
        history.append(row)
        logger.debug("iter %d J=%.6e", state.iteration, J)

    record(J, tM, tA, tF)
    for _ in range(config.n_iter):
        state.adjoint = solve_adjoint(state, config)
        grads = gradient(state, config)
        previous_system, previous_forward, previous_cache = state.system, state.forward, dict(state._cache)
        eps = config.epsilon  # each iteration restarts from the configured step
        for _attempt in range(config.max_halvings + 1):
            state.system = previous_system
            state.system = step(state, grads, config, eps)
            try:
                J_new, tM, tA, tF = evaluate(state, config)
            except ForwardSolveError as exc:
                state.rejected_spd += 1
                if config.step_policy == "fixed":
                    state.system, state.forward, state._cache = previous_system, previous_forward, previous_cache
                    err = StepRejectedError(
                        f"iteration {state.iteration + 1}: {exc}; try a smaller step length (epsilon={eps:g})"
                    )
                    err.state, err.history = state, history
                    raise err from exc
            else:
                if config.step_policy == "fixed" or J_new <= J:
                    break
                state.rejected_increase += 1
            eps *= 0.5
        else:
            state.system, state.forward, state._cache = previous_system, previous_forward, previous_cache
            logger.info("no acceptable step after %d halvings; stopping", config.max_halvings)
            break
        state.epsilon = eps
        state.iteration += 1
        rel = abs(J_new - J) / max(abs(J), 1e-300)
        J = J_new
        record(J, tM, tA, tF)
        if rel < config.rel_tol:
            break
    state.adjoint = solve_adjoint(state, config)
    return state, history


def error_report(prior: CoarseSystem, final: CoarseSystem, params: AssemblyParams, truth):
    """Per-time RMS cell-average errors for the prior model and the final model."""
    truth = np.asarray(truth, dtype=float)
    if truth.shape[0] != params.n_t + 1:
        raise InvalidArgumentError("truth must have one row per time level")
    initial = cell_average_errors(prior, forward_solve(prior, params)[0], truth)
    final_err = cell_average_errors(final, forward_solve(final, params)[0], truth)
    return initial, final_err


def write_history_csv(path, history):
    lines = ["iteration,J,term_M,term_A,term_F"]
    for row in history:
        lines.append(f"{row['iteration']},{row['J']:.17g},{row['term_M']:.17g},{row['term_A']:.17g},{row['term_F']:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_errors_csv(path, initial, final):
    lines = ["time_index,l2_error_initial,l2_error_final"]
    for n, (a, b) in enumerate(zip(initial, final)):
        lines.append(f"{n},{a:.17g},{b:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
