"""End-to-end experiments: truth pipeline, synthetic data, prior model, inversion."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import AssemblyParams, assemble_mass, assemble_stiffness
from .config import ExperimentConfig, load_config, resolve_cells, split_key
from .exceptions import ConfigError
from .forward import ObservationSeries, Trajectory, fine_trajectory, make_observations
from .geometry import CoarseMesh, FineMesh, build_coarse_mesh, build_fine_mesh, read_fractures
from .gmsfem import CoarseSystem, MultiscaleSpace, assemble_coarse, build_space, fine_cell_averages, write_eigenvalues_csv
from .inversion import InversionConfig, error_report, run_inversion, write_errors_csv, write_history_csv


@contextlib.contextmanager
def stage(name, timings=None):
    """Tag any exception raised inside with the pipeline stage name."""
    start = time.perf_counter()
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise
    if timings is not None:
        timings[name] = time.perf_counter() - start


@dataclass
class Model:
    """Fine mesh, multiscale space and coarse blocks for one fracture network."""

    mesh: FineMesh
    space: MultiscaleSpace
    system: CoarseSystem


def build_model(coarse: CoarseMesh, r, fractures, params: AssemblyParams, N_b, normalization="energy", basis_scale=1.0):
    mesh = build_fine_mesh(coarse, r, fractures)
    space = build_space(mesh, coarse, params, N_b, normalization=normalization, basis_scale=basis_scale)
    return Model(mesh, space, assemble_coarse(space, mesh, coarse, params))


@dataclass
class Truth:
    mesh: FineMesh
    trajectory: Trajectory
    averages: np.ndarray  # (n_t + 1, n_cells) fine cell averages


def truth_pipeline(coarse: CoarseMesh, r, fractures, params: AssemblyParams) -> Truth:
    mesh = build_fine_mesh(coarse, r, fractures)
    traj = fine_trajectory(mesh, params, assemble_stiffness(mesh, params), assemble_mass(mesh, params))
    return Truth(mesh, traj, fine_cell_averages(mesh, coarse, traj.states))


def inversion_config(cfg: ExperimentConfig, coarse: CoarseMesh) -> InversionConfig:
    mask = resolve_cells(cfg.update_mask, coarse, "update_mask")
    mask = None if len(mask) == coarse.n_elements else mask
    return InversionConfig(update_mask=mask, observed_cells=None, **cfg.inversion)


@dataclass
class RunResult:
    state: object
    history: list
    errors_initial: np.ndarray
    errors_final: np.ndarray
    data: ObservationSeries
    truth: Truth
    prior: Model
    output: Path


def run_case(cfg: ExperimentConfig, write=True) -> RunResult:
    """Run one experiment and (optionally) write its artifacts to ``cfg.output``."""
    t_start = time.perf_counter()
    timings = {}
    params = cfg.params
    with stage("setup", timings):
        coarse = build_coarse_mesh(cfg.coarse_n)
        observed = resolve_cells(cfg.observed_cells, coarse, "observed_cells")
        inv_cfg = inversion_config(cfg, coarse)
        true_net = read_fractures(cfg.true_fractures, params.k_f)
        prior_net = read_fractures(cfg.prior_fractures, params.k_f)
    with stage("truth pipeline", timings):
        truth = truth_pipeline(coarse, cfg.refine_r, true_net, params)
    with stage("data generation", timings):
        data = make_observations(truth.trajectory, truth.mesh, coarse, observed, cfg.noise, cfg.seed)
    with stage("prior pipeline", timings):
        prior = build_model(coarse, cfg.refine_r, prior_net, params, cfg.N_b, cfg.normalization, cfg.basis_scale)
    out = Path(cfg.output)
    failure = None
    with stage("inversion", timings):
        try:
            state, history = run_inversion(prior.system, params, data, inv_cfg, truth.averages)
        except Exception as exc:
            exc.stage = "inversion"
            failure = exc
            state, history = getattr(exc, "state", None), getattr(exc, "history", [])
    if failure is not None:
        if write and history:
            out.mkdir(parents=True, exist_ok=True)
            write_history_csv(out / "history.csv", history)
            _write_report(out / "report.txt", cfg, coarse, truth, prior, state, history, None, timings, t_start, failure)
        raise failure
    with stage("error report", timings):
        e0, e1 = error_report(prior.system, state.system, params, truth.averages)
    if write:
        with stage("output", timings):
            out.mkdir(parents=True, exist_ok=True)
            write_history_csv(out / "history.csv", history)
            write_errors_csv(out / "errors.csv", e0, e1)
            data.to_csv(out / "observations.csv")
            write_eigenvalues_csv(out / "eigenvalues.csv", prior.space)
            _write_report(out / "report.txt", cfg, coarse, truth, prior, state, history, (e0, e1), timings, t_start)
    return RunResult(state, history, e0, e1, data, truth, prior, out)


def _mesh_line(label, mesh: FineMesh):
    return (
        f"{label}: {mesh.n_vertices} fine vertices, {mesh.n_elements} fine triangles, "
        f"{len(mesh.fracture_edges)} fracture edges, max snap residual {_max(mesh.snap_residuals):.3e}"
    )


def _max(a):
    return float(np.max(a)) if len(a) else 0.0


def _write_report(path, cfg, coarse, truth, prior, state, history, errors, timings, t_start, failure=None):
    lines = ["msinvert run report", ""]
    lines.append("resolved configuration")
    lines.append("----------------------")
    lines.append(cfg.echo())
    lines.append("mesh")
    lines.append("----")
    lines.append(f"coarse: {coarse.n_vertices} vertices, {coarse.n_elements} cells, H = {coarse.H:g}")
    lines.append(_mesh_line("truth", truth.mesh))
    lines.append(_mesh_line("prior", prior.mesh))
    sys_ = prior.system
    lines.append(
        f"coarse DOFs: {sys_.n_dof} ({int(sys_.free.sum())} free), block size {sys_.M_blocks.shape[1]}, "
        f"unknowns {2 * sys_.M_blocks.size}"
    )
    lines.append("")
    lines.append("inversion")
    lines.append("---------")
    lines.append(f"gradient_mode = {cfg.inversion['gradient_mode']}")
    lines.append(f"step_policy = {cfg.inversion['step_policy']}")
    if state is not None:
        rejected = state.rejected_steps > 0
        lines.append(f"step rejected = {'yes' if rejected else 'no'}")
        lines.append(f"rejected steps (positive definiteness lost) = {state.rejected_spd}")
        lines.append(f"rejected steps (objective increased) = {state.rejected_increase}")
        lines.append(f"iterations = {state.iteration}")
    else:
        lines.append("step rejected = yes")
    if history:
        lines.append(f"initial J = {history[0]['J']:.10e}")
        last = history[-1]
        lines.append(
            f"final J = {last['J']:.10e} (term_M {last['term_M']:.4e}, term_A {last['term_A']:.4e}, "
            f"term_F {last['term_F']:.4e})"
        )
    if errors is not None:
        e0, e1 = errors
        lines.append(f"aggregate cell-average error: initial {aggregate_error(e0):.6e}, final {aggregate_error(e1):.6e}")
    if failure is not None:
        lines.append(f"FAILED in stage {getattr(failure, 'stage', '?')}: {failure}")
    lines.append("")
    lines.append("timing (s)")
    lines.append("----------")
    for name, secs in timings.items():
        lines.append(f"{name}: {secs:.2f}")
    lines.append(f"wall time: {time.perf_counter() - t_start:.2f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _rms(a):
    return float(np.sqrt(np.mean(np.square(a)))) if len(a) else 0.0


def aggregate_error(errors):
    """Root-mean-square over all time levels 0..N of per-time errors."""
    return _rms(np.asarray(errors))


def validate(cfg: ExperimentConfig) -> str:
    """Diagnostics for a config without running anything expensive."""
    coarse = build_coarse_mesh(cfg.coarse_n)
    observed = resolve_cells(cfg.observed_cells, coarse, "observed_cells")
    mask = resolve_cells(cfg.update_mask, coarse, "update_mask")
    k_f = cfg.params.k_f
    lines = [f"config: {cfg.source}"]
    lines.append(f"coarse grid: {cfg.coarse_n} x {cfg.coarse_n}, {coarse.n_vertices} vertices, {coarse.n_elements} cells")
    N = cfg.coarse_n * cfg.refine_r
    lines.append(f"fine grid: {N} x {N}, {(N + 1) ** 2} vertices, {2 * N * N} triangles")
    lines.append(f"observed cells: {len(observed)}")
    lines.append(f"update mask: {len(mask)} cells")
    for label, path in (("true", cfg.true_fractures), ("prior", cfg.prior_fractures)):
        net = read_fractures(path, k_f)
        mesh = build_fine_mesh(coarse, cfg.refine_r, net)
        res = ", ".join(f"{x:.3e}" for x in mesh.snap_residuals) or "none"
        lines.append(f"{label} fractures ({path.name}): {len(net.segments)} segments, snap residuals [{res}]")
    d = 3 * cfg.N_b
    n_dof = coarse.n_vertices * cfg.N_b
    n_free = (coarse.n_vertices - len(coarse.dirichlet_vertices())) * cfg.N_b
    lines.append(f"coarse DOFs: {n_dof} ({n_free} free), blocks {d} x {d}, unknowns {2 * coarse.n_elements * d * d}")
    lines.append(f"time steps: {cfg.params.n_t}, dt = {cfg.params.dt:g}")
    return "\n".join(lines)


def sweep(path, key, values, overrides=None):
    """Run one experiment per value of ``key``; outputs go to ``<out>/<key>=<value>``."""
    split_key(key)
    if not values:
        raise ConfigError("sweep needs at least one value")
    results = []
    for value in values:
        over = dict(overrides or {})
        over[key] = value
        cfg = load_config(path, overrides=over)
        cfg.output = Path(cfg.output) / f"{key}={value}"
        results.append((value, run_case(cfg)))
    return results
