"""Locally corrected quadrature for Laplace and Helmholtz layer potentials
on surfaces built from high-order curvilinear triangular patches."""

from .backend import backend_name
from .basis import build_interp_nodes, build_quadrature, koornwinder, n_basis
from .errors import LcquadError
from .geometry import SurfaceMesh, gen_sphere, gen_stellarator, import_flat_tri, load_kpatch
from .kernels import KernelSpec, greens, kernel_matrix, kernel_value

__version__ = "0.1.0"

__all__ = [
    "KernelSpec",
    "LcquadError",
    "SurfaceMesh",
    "backend_name",
    "build_interp_nodes",
    "build_quadrature",
    "gen_sphere",
    "gen_stellarator",
    "greens",
    "import_flat_tri",
    "kernel_matrix",
    "kernel_value",
    "koornwinder",
    "load_kpatch",
    "n_basis",
    "__version__",
]
