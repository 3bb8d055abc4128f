import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from msinvert.assembly import AssemblyParams, assemble_mass, element_data
from msinvert.exceptions import ForwardSolveError, InvalidArgumentError
from msinvert.forward import (
    ObservationSeries,
    cell_average,
    coarse_initial_state,
    coarse_trajectory,
    integrate,
    make_observations,
    recover_flux_averages,
)
from msinvert.geometry import _barycentric_gradients, build_coarse_mesh, build_fine_mesh
from msinvert.gmsfem import assemble_coarse, build_space, fine_cell_averages

# 3-DOF oracle problem shared with the acceptance suite
M3 = np.array([[2.0, 0.5, 0.0], [0.5, 2.0, 0.5], [0.0, 0.5, 2.0]])
A3 = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.5]])
C3 = np.array([1.0, -0.5, 2.0])


def expm_oracle(T):
    return sla.expm(-T * np.linalg.solve(M3, A3)) @ C3


def test_scalar_closed_form():
    traj = integrate(np.eye(1), np.eye(1), None, np.ones(1), T=5.0, n_t=5)
    np.testing.assert_allclose(traj.states[:, 0], 2.0 ** -np.arange(6), rtol=1e-15)
    assert traj.dt == 1.0 and traj.n_t == 5


def test_pure_mass_is_constant():
    traj = integrate(M3, np.zeros((3, 3)), None, C3, T=3.0, n_t=7)
    np.testing.assert_allclose(traj.states, np.tile(C3, (8, 1)), rtol=1e-14)


def test_constant_load():
    # m c' + a c = b has the fixed point b / a
    traj = integrate(np.eye(1), 2.0 * np.eye(1), np.array([4.0]), np.array([2.0]), T=1.0, n_t=3)
    np.testing.assert_allclose(traj.states[:, 0], 2.0, rtol=1e-14)


def test_expm_oracle_fine_steps():
    traj = integrate(M3, A3, None, C3, T=2.0, n_t=1000)
    assert np.abs(traj.states[-1] - expm_oracle(2.0)).max() <= 1e-3


def test_halving_steps_roughly_doubles_error():
    # first order: error ratio tends to 2 from above (2.053, 2.030, 2.016, 2.008)
    errs = [np.abs(integrate(M3, A3, None, C3, 2.0, n).states[-1] - expm_oracle(2.0)).max() for n in (10, 20, 40, 80, 160)]
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 2.0) <= 0.2)
    assert np.all(np.diff(np.abs(ratios - 2.0)) <= 0)


def test_indefinite_system_is_rejected():
    with pytest.raises(ForwardSolveError):
        integrate(np.eye(2), -5.0 * np.eye(2), None, np.ones(2), T=1.0, n_t=1)


def test_bad_time_grid():
    with pytest.raises(InvalidArgumentError):
        integrate(np.eye(1), np.eye(1), None, np.ones(1), T=1.0, n_t=0)


def test_coarse_energy_decays(small):
    traj = coarse_trajectory(small.system, small.params)
    M = small.system.global_M().toarray()
    energy = np.einsum("ni,ij,nj->n", traj.states, M, traj.states)
    assert np.all(np.diff(energy) <= 1e-15 * energy[0])


def test_initial_state_is_projection(small):
    c0 = coarse_initial_state(small.system, 1.0)
    traj = coarse_trajectory(small.system, small.params)
    np.testing.assert_array_equal(traj.states[0], c0)
    # Galerkin condition: (c0 - 1, phi_m) = 0 for every free basis function
    space = small.space
    u = space.prolong(c0)
    Mf = assemble_mass(small.mesh, small.params)
    r = space.basis.T @ (Mf @ (u - 1.0))
    assert np.abs(r[space.free]).max() <= 1e-12


def test_cell_average_of_one_and_zero(small):
    sys_ = small.system
    one = np.zeros(sys_.n_dof)
    one[:: sys_.N_b] = 1.0
    np.testing.assert_allclose(sys_.cell_averages(one), 1.0, rtol=1e-12)
    assert cell_average(sys_, one, 3) == pytest.approx(1.0, rel=1e-12)
    assert np.all(sys_.cell_averages(np.zeros(sys_.n_dof)) == 0.0)
    with pytest.raises(InvalidArgumentError):
        cell_average(sys_, one, sys_.n_elements)


def test_cell_average_matches_fine_quadrature(small):
    sys_, space = small.system, small.space
    c = np.random.default_rng(4).standard_normal(sys_.n_dof)
    fine = fine_cell_averages(small.mesh, small.coarse, space.prolong(c))
    coarse = sys_.cell_averages(c)
    np.testing.assert_allclose(coarse, fine, rtol=1e-10, atol=1e-12 * np.abs(fine).max())


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-10, 10), beta=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_observation_linearity(small, alpha, beta, seed):
    sys_ = small.system
    rng = np.random.default_rng(seed)
    c1, c2 = rng.standard_normal((2, sys_.n_dof))
    lhs = sys_.cell_averages(alpha * c1 + beta * c2)
    rhs = alpha * sys_.cell_averages(c1) + beta * sys_.cell_averages(c2)
    scale = (abs(alpha) + abs(beta)) * np.abs(sys_.cell_averages(np.abs(c1) + np.abs(c2))).max() + 1e-300
    assert np.abs(lhs - rhs).max() <= 1e-13 * scale


def test_observations_noise_and_determinism(small):
    cells = np.arange(small.coarse.n_elements)
    clean = make_observations(small.truth, small.truth_mesh, small.coarse, cells)
    np.testing.assert_array_equal(clean.values, small.truth_averages)
    a = make_observations(small.truth, small.truth_mesh, small.coarse, cells, 0.05, seed=11)
    b = make_observations(small.truth, small.truth_mesh, small.coarse, cells, 0.05, seed=11)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(np.abs(a.values - clean.values) <= 0.05 * np.abs(clean.values) + 1e-15)
    assert not np.array_equal(a.values, clean.values)
    with pytest.raises(InvalidArgumentError):
        make_observations(small.truth, small.truth_mesh, small.coarse, cells, -0.1)


def test_observation_csv_round_trip(tmp_path, small):
    obs = make_observations(small.truth, small.truth_mesh, small.coarse, [1, 5, 6], 0.03, seed=2)
    obs.to_csv(tmp_path / "obs.csv")
    assert (tmp_path / "obs.csv").read_text().splitlines()[0] == "cell_id,time_index,value"
    back = ObservationSeries.from_csv(tmp_path / "obs.csv", obs.times, 0.03)
    np.testing.assert_array_equal(back.cells, obs.cells)
    np.testing.assert_array_equal(back.values, obs.values)


def test_flux_of_linear_and_constant_functions():
    coarse = build_coarse_mesh(3)
    fine = build_fine_mesh(coarse, 4)
    params = AssemblyParams(k_m=1.0)
    sys_ = assemble_coarse(build_space(fine, coarse, params, 1), fine, coarse, params)
    x = coarse.vertices[:, 0]
    areas = coarse.areas()
    for K in range(coarse.n_elements):
        np.testing.assert_allclose(recover_flux_averages(sys_, x, K), [areas[K], 0.0], atol=1e-14)
        np.testing.assert_allclose(recover_flux_averages(sys_, np.ones(coarse.n_vertices), K), 0.0, atol=1e-14)


def fine_flux(mesh, params, u, K):
    """Direct integral of kappa grad u over coarse cell K (fracture edges shared)."""
    data = element_data(mesh)
    tris = mesh.element_to_fine[K]
    g = _barycentric_gradients(mesh.vertices[mesh.elements[tris]])
    grad = np.einsum("ta,tak->tk", u[mesh.elements[tris]], g)
    out = params.k_m * (mesh.areas()[tris][:, None] * grad).sum(axis=0)
    sel = np.isin(data.frac_tri, tris)
    for t, loc, w in zip(data.frac_tri[sel], data.frac_local[sel], data.frac_weight[sel]):
        a, b = mesh.elements[t, loc]
        out += params.k_f * w * (u[b] - u[a]) * (mesh.vertices[b] - mesh.vertices[a])
    return out


def test_flux_in_fractured_cells(small_nb1):
    s = small_nb1
    c = np.random.default_rng(9).standard_normal(s.space.n_dof)
    u = s.space.prolong(c)
    for K in range(s.coarse.n_elements):
        ref = fine_flux(s.mesh, s.params, u, K)
        got = recover_flux_averages(s.system, c, K)
        assert np.linalg.norm(got - ref) <= 1e-8 * np.linalg.norm(ref)
