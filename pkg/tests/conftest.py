import numpy as np
import pytest

from msinvert.assembly import AssemblyParams, assemble_mass, assemble_stiffness
from msinvert.forward import fine_trajectory, make_observations
from msinvert.geometry import FractureNetwork, build_coarse_mesh, build_fine_mesh
from msinvert.gmsfem import assemble_coarse, build_space, fine_cell_averages

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)


class Small:
    """2x2 coarse grid, r = 4, one fracture in the truth and a shifted one in the prior."""

    def __init__(self, N_b=2, normalization="mass", basis_scale=1.0, n_t=4, T=4.0):
        self.params = AssemblyParams(n_t=n_t, T=T)
        self.coarse = build_coarse_mesh(2)
        true_net = FractureNetwork(np.array([[[0.1, 0.3], [0.8, 0.6]]]))
        prior_net = FractureNetwork(np.array([[[0.1, 0.4], [0.8, 0.5]]]))
        self.truth_mesh = build_fine_mesh(self.coarse, 4, true_net)
        self.mesh = build_fine_mesh(self.coarse, 4, prior_net)
        p = self.params
        self.truth = fine_trajectory(self.truth_mesh, p, assemble_stiffness(self.truth_mesh, p), assemble_mass(self.truth_mesh, p))
        self.truth_averages = fine_cell_averages(self.truth_mesh, self.coarse, self.truth.states)
        self.data = make_observations(self.truth, self.truth_mesh, self.coarse, np.arange(self.coarse.n_elements))
        self.space = build_space(self.mesh, self.coarse, p, N_b, normalization=normalization, basis_scale=basis_scale)
        self.system = assemble_coarse(self.space, self.mesh, self.coarse, p)


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture(scope="session")
def small_nb1():
    return Small(N_b=1)


def perturbed(system, scale=1e-2, seed=0):
    """Same system with every block replaced by ``(I + scale E) B (I + scale E)^T``.

    A congruence keeps each block symmetric positive semi-definite, so the
    global matrices stay SPD while every entry moves.
    """
    rng = np.random.default_rng(seed)
    n, d, _ = system.M_blocks.shape
    P = np.eye(d) + scale * rng.standard_normal((2, n, d, d))
    M = P[0] @ system.M_blocks @ np.swapaxes(P[0], 1, 2)
    A = P[1] @ system.A_blocks @ np.swapaxes(P[1], 1, 2)
    return system.with_blocks(0.5 * (M + np.swapaxes(M, 1, 2)), 0.5 * (A + np.swapaxes(A, 1, 2)))
