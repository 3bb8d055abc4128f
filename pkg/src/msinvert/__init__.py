"""Generalized multiscale inversion for parabolic flow in fractured media.

Modules: ``geometry`` (meshes, fracture snapping), ``assembly`` (fine P1
matrices), ``gmsfem`` (multiscale space and coarse blocks), ``forward``
(implicit Euler, observations), ``inversion`` (objective, adjoint,
gradient descent), ``config``/``experiment``/``cli`` (experiment harness).
"""

from .assembly import AssemblyParams
from .exceptions import MsInvertError
from .geometry import FractureNetwork, build_coarse_mesh, build_fine_mesh
from .gmsfem import CoarseSystem, assemble_coarse, build_space
from .inversion import InversionConfig, run_inversion

__all__ = [
    "AssemblyParams",
    "CoarseSystem",
    "FractureNetwork",
    "InversionConfig",
    "MsInvertError",
    "assemble_coarse",
    "build_coarse_mesh",
    "build_fine_mesh",
    "build_space",
    "run_inversion",
]

__version__ = "0.1.0"
